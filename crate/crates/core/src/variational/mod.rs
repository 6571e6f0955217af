//! Backward-factorized Gaussian variational families.
//!
//! A family supplies the marginal `q_t` through natural parameters `eta_t` and
//! the backward kernels `q_{t-1|t}(x_t, .)` through potentials
//! `eta~_t(x_t)`, added to the previous marginal's natural parameters.

pub mod amortized;
pub mod conjugate;
pub mod non_amortized;

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{flat_len, GaussianNatural};
use crate::params::FlatParams;

pub use amortized::{AmortizedConfig, AmortizedFamily, AmortizerState, AmortizerTrace, AmortizerWindow};
pub use conjugate::{exact_conjugate_mode, ExactConjugateFamily, KalmanState, LinearPotential};
pub use non_amortized::{NonAmortizedFamily, NonAmortizedSlot};

/// Output-layer gain for the head networks. Full Glorot output weights give a
/// random Cholesky factor that is often near singular, so q_t starts with huge
/// variances; a small gain starts every head near the isotropic raw = 0 point.
pub const HEAD_OUTPUT_GAIN: f64 = 0.1;

/// Variational parameters `phi`.
pub type VarParams = FlatParams;

pub trait VariationalFamily: Send + Sync {
    /// Whatever the family carries from one time step to the next.
    type State: Clone + Debug + Serialize + DeserializeOwned + Send + Sync;

    fn dim_x(&self) -> usize;

    fn initial_state(&self) -> Self::State;

    /// Folds `y_t` into the state; the result determines `q_t`.
    fn advance(&self, params: &VarParams, state: &Self::State, y: &DVector<f64>) -> Result<Self::State>;

    /// `eta_t` for the state returned by `advance`.
    fn marginal(&self, params: &VarParams, state: &Self::State) -> Result<GaussianNatural>;

    /// Flat potential `eta~_t(x_t)` in the layout of [`GaussianNatural::to_flat`].
    fn potential(&self, params: &VarParams, x_t: &DVector<f64>) -> DVector<f64>;

    /// Adds `(d eta_t / d phi)^T cot` into `out`.
    fn marginal_vjp(&self, params: &VarParams, state: &Self::State, cot: &DVector<f64>, out: &mut [f64]);

    /// Adds `(d eta~(x_t) / d phi)^T cot` into `out`.
    fn potential_vjp(&self, params: &VarParams, x_t: &DVector<f64>, cot: &DVector<f64>, out: &mut [f64]);

    /// Whether `eta_{t-1}` inside the backward kernel depends on the parameters
    /// being optimised at time `t`. Families whose parameters are not shared
    /// through time return `false`, which also stops the propagation of the
    /// `G` statistics.
    fn shares_params_through_time(&self) -> bool {
        true
    }

    /// `(d eta_t / d phi)^T` as a `dim(phi) x flat_len(d)` matrix.
    fn marginal_jacobian_t(&self, params: &VarParams, state: &Self::State) -> DMatrix<f64> {
        let k = flat_len(self.dim_x());
        let mut jt = DMatrix::zeros(params.len(), k);
        let mut seed = DVector::zeros(k);
        for c in 0..k {
            seed[c] = 1.0;
            let mut col = jt.column_mut(c);
            self.marginal_vjp(params, state, &seed, col.as_mut_slice());
            seed[c] = 0.0;
        }
        jt
    }
}

/// Bounds `[log eps-, log eps+]` enforced on log-potentials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialClip {
    pub log_eps_minus: f64,
    pub log_eps_plus: f64,
}

impl Default for PotentialClip {
    fn default() -> Self {
        Self {
            log_eps_minus: -30.0,
            log_eps_plus: 30.0,
        }
    }
}

impl PotentialClip {
    pub fn new(log_eps_minus: f64, log_eps_plus: f64) -> Result<Self> {
        if !(log_eps_minus < log_eps_plus) {
            return Err(Error::BadBounds {
                lower: log_eps_minus,
                upper: log_eps_plus,
            });
        }
        Ok(Self {
            log_eps_minus,
            log_eps_plus,
        })
    }

    pub fn apply(&self, raw: f64) -> f64 {
        raw.clamp(self.log_eps_minus, self.log_eps_plus)
    }
}

pub fn clip_potential(raw_log_pot: f64, log_eps_minus: f64, log_eps_plus: f64) -> Result<f64> {
    Ok(PotentialClip::new(log_eps_minus, log_eps_plus)?.apply(raw_log_pot))
}

/// `<eta~, T(x_prev)>` for a flat potential, optionally clipped.
pub fn log_potential_flat(pot: &[f64], x_prev: &[f64], clip: Option<&PotentialClip>) -> f64 {
    let raw = inner_flat(pot, x_prev);
    match clip {
        Some(c) => c.apply(raw),
        None => raw,
    }
}

/// `<eta, T(x)>` for flat natural parameters, without forming `x x^T`.
pub fn inner_flat(eta: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for r in 0..d {
        acc += eta[r] * x[r];
    }
    for c in 0..d {
        let mut col = 0.0;
        for r in 0..d {
            col += eta[d + c * d + r] * x[r];
        }
        acc += col * x[c];
    }
    acc
}

/// `eta_{t-1|t} = eta_{t-1} + eta~_t(x_t)` with the potential given flat.
pub fn backward_kernel_from_flat(eta_prev: &GaussianNatural, pot: &[f64]) -> Result<GaussianNatural> {
    let d = eta_prev.dim();
    let pot = GaussianNatural::from_flat(d, pot)?;
    let k = eta_prev.add(&pot)?;
    k.validate()?;
    Ok(k)
}

/// Largest value of `<eta~, T(x)>` over `x`, finite only when the quadratic part
/// is negative definite: `-1/4 eta1^T eta2^{-1} eta1`.
pub fn potential_sup(pot: &[f64], d: usize) -> Option<f64> {
    let eta1 = DVector::from_column_slice(&pot[..d]);
    let neg2 = DMatrix::from_column_slice(d, d, &pot[d..]) * -2.0;
    let chol = nalgebra::Cholesky::new(crate::expfam::symmetrize(&neg2))?;
    // -1/4 eta1^T eta2^{-1} eta1 = 1/2 eta1^T (-2 eta2)^{-1} eta1
    Some(0.5 * eta1.dot(&chol.solve(&eta1)))
}

/// Spectral norm by power iteration on `W^T W`: at most 100 iterations, or until
/// the estimate changes by less than `1e-10` relatively.
pub fn spectral_norm(w: &DMatrix<f64>) -> f64 {
    let n = w.ncols();
    if n == 0 || w.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |k, _| 1.0 + 0.37 * ((k as f64 + 1.0) * 1.618).sin());
    v /= v.norm();
    let mut sigma = 0.0f64;
    for _ in 0..100 {
        let wv = w * &v;
        let s = wv.norm();
        if s == 0.0 {
            return 0.0;
        }
        let next = w.transpose() * wv;
        let nn = next.norm();
        if nn == 0.0 {
            return s;
        }
        v = next / nn;
        let done = (s - sigma).abs() <= 1e-10 * s;
        sigma = s;
        if done {
            break;
        }
    }
    sigma.max((w * &v).norm())
}

/// Rescales `w` to spectral norm `rho_max` if it exceeds it; otherwise returns it
/// unchanged.
pub fn spectral_project(w: &DMatrix<f64>, rho_max: f64) -> DMatrix<f64> {
    assert_eq!(w.nrows(), w.ncols(), "recurrent matrix must be square");
    let s = spectral_norm(w);
    // the relative slack keeps the projection idempotent under roundoff
    if s <= rho_max * (1.0 + 1e-12) {
        w.clone()
    } else {
        w * (rho_max / s)
    }
}
