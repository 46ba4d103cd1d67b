//! Finite-difference verification of the reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Floor for the relative-error denominator.
const DENOM_FLOOR: f64 = 1e-8;

/// Compare the reverse-mode gradient of a scalar function against central
/// differences, elementwise. Returns the worst relative error, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// `build` must be deterministic: it is re-run once per perturbed element.
pub fn grad_check<F>(build: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    grad_check_perturbed(build, x, eps, 0.0)
}

/// [`grad_check`] with a fault-injection offset added to the first analytic
/// gradient element. Non-zero offsets exist only so the self-check harness
/// can prove it detects a corrupted backward pass.
pub fn grad_check_perturbed<F>(
    build: F,
    x: &Tensor<f64>,
    eps: f64,
    perturb: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::config(format!(
            "grad_check eps {eps} outside [1e-6, 1e-3]"
        )));
    }
    if !x.all_finite() {
        return Err(Error::input("grad_check input contains non-finite values".to_string()));
    }

    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let out = build(&mut g, xid)?;
    if g.value(out).numel() != 1 {
        return Err(Error::config(format!(
            "grad_check function must return a scalar, got shape {:?}",
            g.value(out).shape()
        )));
    }
    g.backward(out)?;
    let mut analytic = g
        .grad(xid)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if perturb != 0.0 {
        analytic.data_mut()[0] += perturb;
    }

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xid = g.constant(t.clone());
        let out = build(&mut g, xid)?;
        Ok(g.value(out).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(DENOM_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::PadMode;
    use crate::tensor::random_uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_gradient_is_exact() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.3 + 0.1);
        let err = grad_check(|g, x| Ok(g.sum(x)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(42);
        let xt = random_uniform::<f64, _>(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
        let w = random_uniform::<f64, _>(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let err = grad_check(
            move |g, wid| {
                let x = g.constant(xt.clone());
                let b = g.constant(Tensor::zeros(&[3]));
                let y = g.conv2d(x, wid, b, 1, PadMode::Zeros)?;
                let sq = g.mul(y, y)?;
                Ok(g.mean(sq))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv weight grad error {err}");
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let x = Tensor::<f64>::full(&[1], 1.0);
        assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 1e-2).is_err());
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = Tensor::<f64>::full(&[2], 1.0);
        let r = grad_check(|g, x| Ok(g.relu(x)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::from_fn(&[4], |i| 0.2 + i as f64 * 0.1);
        let err = grad_check_perturbed(|g, x| Ok(g.sum(x)), &x, 1e-5, 0.5).unwrap();
        assert!(err > 0.3);
    }
}
