use super::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so entries whose true gradient is zero are compared absolutely at the
/// finite-difference noise level.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub tol: f64,
    pub passed: bool,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&vars)?.value();
    if out.len() != 1 {
        return Err(TensorError::NotScalar { shape: out.shape().to_vec() });
    }
    Ok(out.data()[0])
}

/// Compare tape gradients of a scalar function of several inputs against
/// central finite differences.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, tol, passed: true };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let x0 = input.data()[idx];
            probe[which].data_mut()[idx] = x0 + FD_STEP;
            let up = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[idx] = x0 - FD_STEP;
            let down = eval_scalar(&f, &probe)?;
            probe[which].data_mut()[idx] = x0;

            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[which].data()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst = (which, idx);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error.is_finite() && report.max_rel_error < tol;
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>, TensorError>,
{
    grad_check_many(|v| f(v[0]), std::slice::from_ref(x), tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Padding;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::from_fn([3, 4], |i| i as f64 * 0.25);
        let r = grad_check(|v| v.sum(), &x, 1e-10).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn conv_pool_softmax_composition() {
        let x = Tensor::from_fn([1, 5, 5, 2], |i| (i as f64 * 1.37).sin());
        let r = grad_check(
            |v| {
                let tape = v.tape();
                let w = tape.constant(Tensor::from_fn([3, 3, 2, 3], |i| (i as f64 * 0.71).cos() * 0.5));
                let b = tape.constant(Tensor::from_fn([3], |i| i as f64 * 0.1));
                let y = v.conv2d(w, b, 1, Padding::Same)?.maxpool2d(3, 2, Padding::Same)?;
                let y = y.reshape([1, 27])?.softmax(1)?;
                let weights = tape.constant(Tensor::from_fn([1, 27], |i| (i as f64).sin()));
                y.mul(weights)?.sum()
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::ones([2]);
        assert!(matches!(grad_check(|v| v.scale(2.0), &x, 1e-4), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn wrong_backward_rule_is_caught() {
        // y = x^2 recorded with a backward rule of x instead of 2x.
        let x = Tensor::from_fn([4], |i| i as f64 + 0.5);
        let r = grad_check(
            |v| {
                let xv = v.value();
                let sq = xv.map(|a| a * a);
                let wrong = v.tape().record("bad_square", sq, &[v], Box::new(move |g| {
                    let gd = g.data().iter().zip(xv.data()).map(|(g, a)| g * a).collect();
                    vec![Some(Tensor::new(g.shape().to_vec(), gd).unwrap())]
                }))?;
                wrong.sum()
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1e-4);
    }
}
