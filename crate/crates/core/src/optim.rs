//! AdamW with decoupled weight decay.

use crate::error::TensorError;
use crate::model::ModelParams;
use crate::tensor::{Element, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state: one first/second moment per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Element = f32> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(params: &ModelParams<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, p)| Tensor::zeros(p.shape().to_vec())).collect();
        AdamW { lr, weight_decay, beta1: BETA1, beta2: BETA2, eps: ADAM_EPS, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One update: `θ ← θ·(1 − lr·wd) − lr · m̂ / (√v̂ + eps)`.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::InvalidArgument {
                    op: "adamw_step",
                    reason: format!("gradient for `{name}` has shape {:?}, expected {:?}", g.shape(), p.shape()),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let (one_b1, one_b2) = (c(1.0 - self.beta1), c(1.0 - self.beta2));
        let bias1 = c(1.0 - self.beta1.powi(t));
        let bias2 = c(1.0 - self.beta2.powi(t));
        let lr = c(self.lr);
        let eps = c(self.eps);
        let shrink = c(1.0 - self.lr * self.weight_decay);

        for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] = pd[i] * shrink - lr * (m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ModelParams<f64> {
        let mut p = ModelParams::default();
        p.insert("theta", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = single(2.5);
        let mut opt = AdamW::new(&p, 0.0018, 0.00012);
        let factor = 1.0 - 0.0018 * 0.00012;
        let mut expected = 2.5;
        for _ in 0..10 {
            opt.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
            expected *= factor;
            assert_eq!(p.get("theta").unwrap().data()[0], expected);
        }
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn one_step_hand_value() {
        // m = 0.1, v = 0.001; m̂ = 0.1 / 0.1 = 1, v̂ = 0.001 / 0.001 = 1;
        // θ' = 1 − 0.001 · 1 / (1 + 1e-8).
        let mut p = single(1.0);
        let mut opt = AdamW::new(&p, 0.001, 0.0);
        opt.step(&mut p, &[Tensor::scalar(1.0)]).unwrap();
        let m: f64 = 0.1;
        let v: f64 = 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = 1.0 - 0.001 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.get("theta").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.999_000_000_01).abs() < 1e-12);
    }

    #[test]
    fn decay_is_decoupled_from_moment_history() {
        let grads = [0.3, -1.2, 0.8, 0.0, 0.0];
        let run = |wd: f64| {
            let mut p = single(0.7);
            let mut opt = AdamW::new(&p, 0.01, wd);
            let mut before = Vec::new();
            for g in grads {
                before.push(p.get("theta").unwrap().data()[0]);
                opt.step(&mut p, &[Tensor::scalar(g)]).unwrap();
            }
            (before, p.get("theta").unwrap().data()[0])
        };
        // The decay term of a single step is exactly lr·wd·θ, whatever m and v hold.
        let mut p = single(0.7);
        let mut with = AdamW::new(&p, 0.01, 0.1);
        for g in &grads[..3] {
            with.step(&mut p, &[Tensor::scalar(*g)]).unwrap();
        }
        let mut without = with.clone();
        without.weight_decay = 0.0;
        let (mut a, mut b) = (p.clone(), p.clone());
        let theta = p.get("theta").unwrap().data()[0];
        with.step(&mut a, &[Tensor::scalar(0.0)]).unwrap();
        without.step(&mut b, &[Tensor::scalar(0.0)]).unwrap();
        let diff = b.get("theta").unwrap().data()[0] - a.get("theta").unwrap().data()[0];
        assert!((diff - 0.01 * 0.1 * theta).abs() < 1e-15);

        let (t1, f1) = run(0.05);
        let (t2, f2) = run(0.05);
        assert_eq!((t1, f1), (t2, f2));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(&p, 0.1, 0.0);
        assert!(opt.step(&mut p, &[Tensor::zeros([2])]).is_err());
        assert!(opt.step(&mut p, &[]).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}
