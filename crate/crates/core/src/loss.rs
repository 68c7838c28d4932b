use crate::autograd::Var;
use crate::error::TensorError;
use crate::tensor::{Element, Tensor};

/// Mean cross-entropy against label-smoothed targets
/// `y' = onehot · (1 − eps) + eps / K`.
pub fn label_smoothed_ce<'t, T: Element>(
    logits: Var<'t, T>,
    onehot: &Tensor<T>,
    eps: f64,
) -> Result<Var<'t, T>, TensorError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(TensorError::InvalidArgument {
            op: "label_smoothed_ce",
            reason: format!("smoothing {eps} outside [0, 1)"),
        });
    }
    let z = logits.value();
    if z.rank() != 2 || z.shape() != onehot.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "label_smoothed_ce",
            left: z.shape().to_vec(),
            right: onehot.shape().to_vec(),
        });
    }
    let (b, k) = (z.shape()[0], z.shape()[1]);
    if b == 0 {
        return Err(TensorError::InvalidArgument { op: "label_smoothed_ce", reason: "empty batch".into() });
    }
    for row in onehot.data().chunks(k) {
        let s = row.iter().fold(0.0, |acc, v| acc + v.to_f64().unwrap_or(f64::NAN));
        if (s - 1.0).abs() > 1e-4 {
            return Err(TensorError::InvalidArgument {
                op: "label_smoothed_ce",
                reason: format!("target row sums to {s}, expected 1"),
            });
        }
    }

    let on = T::from_f64_lossy(1.0 - eps);
    let off = T::from_f64_lossy(eps / k as f64);
    let targets: Vec<T> = onehot.data().iter().map(|&y| y * on + off).collect();
    let mut probs = vec![T::zero(); b * k];
    let mut total = T::zero();
    for r in 0..b {
        let row = &z.data()[r * k..(r + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum_exp = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
        let lse = max + sum_exp.ln();
        for j in 0..k {
            probs[r * k + j] = (row[j] - lse).exp();
            total = total - targets[r * k + j] * (row[j] - lse);
        }
    }
    let bn = T::from_usize(b).expect("batch fits");
    let loss = Tensor::scalar(total / bn);
    logits.tape().record(
        "label_smoothed_ce",
        loss,
        &[logits],
        Box::new(move |g| {
            let scale = g.data()[0] / bn;
            let dz = probs.iter().zip(&targets).map(|(&p, &y)| (p - y) * scale).collect();
            vec![Some(Tensor::new([b, k], dz).expect("shape"))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{grad_check, Tape};

    fn onehot(labels: &[usize], k: usize) -> Tensor<f64> {
        Tensor::from_fn([labels.len(), k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 })
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        for eps in [0.0, 0.1, 0.5, 0.9] {
            let tape = Tape::<f64>::new();
            let z = tape.leaf(Tensor::full([3, 8], 0.37));
            let l = label_smoothed_ce(z, &onehot(&[0, 5, 7], 8), eps).unwrap().value().data()[0];
            assert!((l - 8f64.ln()).abs() < 1e-12, "eps {eps}: {l}");
        }
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let tape = Tape::<f64>::new();
        let z = [[2.0, -1.0, 0.5], [0.0, 3.0, 1.0]];
        let labels = [0, 2];
        let logits = tape.leaf(Tensor::new([2, 3], z.iter().flatten().copied().collect()).unwrap());
        let l = label_smoothed_ce(logits, &onehot(&labels, 3), 0.0).unwrap().value().data()[0];
        let expected: f64 = z
            .iter()
            .zip(labels)
            .map(|(row, y)| -(row[y].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln())
            .sum::<f64>()
            / 2.0;
        assert!((l - expected).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let y = onehot(&[1, 3, 0, 2], 4);
        let z = Tensor::from_fn([4, 4], |i| (i as f64 * 1.7).sin() * 2.0);
        let r = grad_check(|v| label_smoothed_ce(v, &y, 0.1), &z, 1e-5).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn rejects_bad_smoothing() {
        let tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros([1, 2]));
        assert!(label_smoothed_ce(z, &onehot(&[0], 2), 1.0).is_err());
        assert!(label_smoothed_ce(z, &onehot(&[0], 2), -0.1).is_err());
        assert!(label_smoothed_ce(z, &Tensor::zeros([1, 2]), 0.1).is_err());
    }
}
