//! Generative state-space models.
//!
//! Every model here has a Gaussian transition with diagonal noise, so the
//! transition density is exposed as a mean map plus a variance vector; the
//! recursion engine evaluates it pairwise over particle sets. Missing emission
//! coordinates are encoded as `NaN` in `y` and contribute nothing to `log_g` or
//! its gradient.

pub mod chaotic;
pub mod lgssm;
pub mod residual;

use std::any::Any;

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::expfam::diag_gaussian_log_pdf;
use crate::params::FlatParams;

pub use chaotic::ChaoticRnn;
pub use lgssm::LinearGaussianSsm;
pub use residual::ResidualNonlinearSsm;

/// Learnable model parameters `theta`.
pub type ModelParams = FlatParams;

/// Simulated latent states and observations, `len + 1` entries each.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub obs: Vec<DVector<f64>>,
}

pub fn is_observed(v: f64) -> bool {
    !v.is_nan()
}

pub trait StateSpaceModel: Send + Sync {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    fn params(&self) -> &ModelParams;
    fn set_params(&mut self, flat: &DVector<f64>) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// `log chi(x0)`.
    fn log_initial(&self, x0: &DVector<f64>) -> f64;
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64>;

    /// Mean of `X_t | X_{t-1} = x_prev`.
    fn transition_mean(&self, x_prev: &DVector<f64>) -> DVector<f64>;
    /// Diagonal of the transition noise covariance.
    fn transition_var(&self) -> DVector<f64>;

    fn sample_emission(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64>;

    /// `log g(x, y)`, skipping `NaN` coordinates of `y`.
    fn log_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;

    /// Adds `weight * grad_theta log m_t(x_prev, x)` into `out`.
    fn accumulate_grad_log_m(&self, x_prev: &DVector<f64>, x: &DVector<f64>, t: usize, weight: f64, out: &mut [f64]);

    /// Adds `weight * grad_theta log g(x, y)` into `out`.
    fn accumulate_grad_log_g(&self, x: &DVector<f64>, y: &DVector<f64>, weight: f64, out: &mut [f64]);

    fn as_any(&self) -> &dyn Any;

    /// `log m_t(x_prev, x)`; at `t = 0` this is `log chi(x)` and `x_prev` is ignored.
    fn log_m(&self, x_prev: &DVector<f64>, x: &DVector<f64>, t: usize) -> f64 {
        if t == 0 {
            self.log_initial(x)
        } else {
            let mean = self.transition_mean(x_prev);
            diag_gaussian_log_pdf(x.as_slice(), mean.as_slice(), self.transition_var().as_slice())
        }
    }

    fn sample_transition(&self, x_prev: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let mean = self.transition_mean(x_prev);
        let var = self.transition_var();
        DVector::from_iterator(
            mean.len(),
            (0..mean.len()).map(|k| {
                let z: f64 = StandardNormal.sample(rng);
                mean[k] + var[k].sqrt() * z
            }),
        )
    }

    /// Draws `X_{0:len}` and `Y_{0:len}`.
    fn simulate(&self, len: usize, rng: &mut dyn RngCore) -> Trajectory {
        let mut states = Vec::with_capacity(len + 1);
        let mut obs = Vec::with_capacity(len + 1);
        let mut x = self.sample_initial(rng);
        for t in 0..=len {
            if t > 0 {
                x = self.sample_transition(&x, rng);
            }
            obs.push(self.sample_emission(&x, rng));
            states.push(x.clone());
        }
        Trajectory { states, obs }
    }

    /// `grad_theta [log m_t(x_prev, x) + log g(x, y)]`.
    fn grad_theta_log_joint_pair(&self, x_prev: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>, t: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.num_params());
        self.accumulate_grad_log_m(x_prev, x, t, 1.0, out.as_mut_slice());
        self.accumulate_grad_log_g(x, y, 1.0, out.as_mut_slice());
        out
    }
}

pub(crate) fn standard_normal_vec(d: usize, rng: &mut dyn RngCore) -> DVector<f64> {
    DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)))
}
