//! Reverse-mode gradients of the log-densities the estimators need, truncated
//! backpropagation through the amortizer, and a finite-difference verifier.

pub mod suite;
pub mod tape;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::StateSpaceModel;
use crate::variational::amortized::{AmortizedFamily, AmortizerWindow};
use crate::variational::VarParams;

pub use tape::{NodeId, Tape};

/// Which parameters a gradient is taken with respect to, and how many past
/// amortizer steps are unrolled before the state is treated as constant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GradRequest {
    pub wrt: GradTarget,
    pub truncation_window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradTarget {
    Phi,
    Theta,
}

impl Default for GradRequest {
    fn default() -> Self {
        Self {
            wrt: GradTarget::Phi,
            truncation_window: 2,
        }
    }
}

/// `grad_phi log q_t(x)` where `q_t` is the marginal at the end of `window`.
pub fn grad_phi_log_marginal(
    family: &AmortizedFamily,
    params: &VarParams,
    window: &AmortizerWindow,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    family.grad_log_marginal(params, window, x)
}

/// `grad_phi log q_{t-1|t}(x_t, x_prev)`; `prev_window` ends at `a_{t-1}`.
pub fn grad_phi_log_backward(
    family: &AmortizedFamily,
    params: &VarParams,
    prev_window: &AmortizerWindow,
    x_t: &DVector<f64>,
    x_prev: &DVector<f64>,
) -> Result<DVector<f64>> {
    family.grad_log_backward(params, prev_window, x_t, x_prev)
}

/// `grad_theta h~_t(x_prev, x)`. The variational denominator of `h~_t` does not
/// depend on the model parameters, so this is the model's own pair gradient.
pub fn grad_theta_htilde<M: StateSpaceModel + ?Sized>(
    model: &M,
    x_prev: &DVector<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
    t: usize,
) -> DVector<f64> {
    model.grad_theta_log_joint_pair(x_prev, x, y, t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `f` at `x0`. The relative
/// error of coordinate `i` uses the denominator `max(1, |analytic_i|)`.
pub fn fd_check<F>(mut f: F, x0: &DVector<f64>, analytic: &DVector<f64>, h: f64, tol: f64) -> Result<FdReport>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.clone();
    let mut worst = (0.0f64, 0usize);
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteFunctionValue(i));
        }
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    Ok(FdReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x0 = DVector::from_vec(vec![0.5, -1.5, 2.0]);
        let r = fd_check(|x| 0.5 * x.norm_squared(), &x0, &x0, 1e-6, 1e-9).unwrap();
        assert!(r.passed && r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn exp_sum_within_tolerance() {
        let x0: DVector<f64> = DVector::from_vec(vec![0.01, -0.02, 0.03]);
        let g = DVector::from_element(3, x0.sum().exp());
        let r = fd_check(|x| x.sum().exp(), &x0, &g, 1e-6, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_gradient_fails() {
        let x0 = DVector::from_vec(vec![1.0, 2.0]);
        let wrong = DVector::from_vec(vec![1.0, 0.0]);
        let r = fd_check(|x| 0.5 * x.norm_squared(), &x0, &wrong, 1e-6, 1e-5).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let x0 = DVector::from_vec(vec![0.0]);
        let r = fd_check(|x| (x[0]).ln(), &x0, &x0, 1e-6, 1e-5);
        assert!(matches!(r, Err(Error::NonFiniteFunctionValue(0))));
    }
}
