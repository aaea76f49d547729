//! Central finite-difference gradient checking.
//!
//! The checker perturbs leaf data and re-runs the forward closure, so it
//! exercises only the forward path and is independent of every backward
//! implementation it verifies.

use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` (a scalar-valued forward pass over
/// `leaves`) with respect to each leaf.
pub fn finite_difference_grads(
    leaves: &[Tensor],
    f: impl Fn() -> Tensor,
    h: f64,
) -> Vec<Vec<f64>> {
    let mut grads = Vec::with_capacity(leaves.len());
    for leaf in leaves {
        let n = leaf.numel();
        let base = leaf.data_vec();
        let mut g = vec![0.0; n];
        for i in 0..n {
            let mut plus = base.clone();
            plus[i] += h;
            leaf.set_data(plus);
            let fp = f().item();

            let mut minus = base.clone();
            minus[i] -= h;
            leaf.set_data(minus);
            let fm = f().item();

            g[i] = (fp - fm) / (2.0 * h);
        }
        leaf.set_data(base);
        grads.push(g);
    }
    grads
}

/// Max relative error between analytic and numeric gradients, with an
/// absolute floor so near-zero entries compare sanely.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Runs backward through `f` once, then finite differences, and returns the
/// worst relative error over all leaves.
pub fn check(leaves: &[Tensor], f: impl Fn() -> Tensor) -> f64 {
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = f();
    loss.backward().expect("scalar loss");
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad_vec().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();
    let numeric = finite_difference_grads(leaves, f, FD_STEP);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| max_rel_err(a, n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_a_wrong_gradient() {
        // d(sum(2x))/dx = 2 everywhere; compare against sum(x) to make sure
        // the harness actually discriminates.
        let x = Tensor::from_vec(vec![0.3, -0.7], &[2]).unwrap().requires_grad(true);
        let err = {
            x.zero_grad();
            let loss = x.scale(2.0).sum_all();
            loss.backward().unwrap();
            let analytic = x.grad_vec().unwrap();
            let numeric = finite_difference_grads(&[x.clone()], || x.sum_all(), FD_STEP);
            max_rel_err(&analytic, &numeric[0])
        };
        assert!(err > 0.1, "harness failed to flag a 2x-vs-x mismatch: {err}");
    }

    #[test]
    fn passes_a_correct_gradient() {
        let x = Tensor::from_vec(vec![0.3, -0.7, 1.2], &[3]).unwrap().requires_grad(true);
        let err = check(&[x.clone()], || x.mul(&x).unwrap().sum_all());
        assert!(err < 1e-9, "rel err {err}");
    }
}
