use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{VarParams, VariationalFamily};
use crate::error::{check_dim, Result};
use crate::expfam::{flat_len, GaussianMoments, GaussianNatural};
use crate::models::{LinearGaussianSsm, StateSpaceModel};
use crate::oracle::{as_lgssm, kalman_predict, kalman_prior, kalman_update, FilterOutput, GaussianChain};
use crate::params::ParamLayout;

/// A potential that is affine in `x_t`: `eta~(x_t) = (b x_t, c)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPotential {
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearPotential {
    /// `(F^T Q^{-1} x, -1/2 F^T Q^{-1} F)`: the `x_{t-1}`-dependent part of
    /// `log m(x_{t-1}, x_t)`.
    pub fn from_transition(model: &LinearGaussianSsm) -> Self {
        let ft = model.f().transpose() / model.q_var;
        let c = &ft * model.f() * -0.5;
        Self { b: ft, c }
    }

    pub fn flat_at(&self, x_t: &DVector<f64>) -> DVector<f64> {
        let d = self.c.nrows();
        let mut out = DVector::zeros(flat_len(d));
        out.rows_mut(0, d).copy_from(&(&self.b * x_t));
        out.rows_mut(d, d * d).copy_from_slice(self.c.as_slice());
        out
    }
}

/// Kalman filtering moments carried between steps; `None` before `y_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanState {
    pub filt: Option<GaussianMoments>,
}

/// The exact posterior of a linear-Gaussian model written as a
/// backward-factorized family: marginals are Kalman filters, backward kernels
/// are exact. It has no free parameters and serves as a zero-KL reference.
#[derive(Clone, Debug)]
pub struct ExactConjugateFamily {
    model: LinearGaussianSsm,
    potential: LinearPotential,
}

impl ExactConjugateFamily {
    pub fn new(model: &dyn StateSpaceModel) -> Result<Self> {
        let model = as_lgssm(model)?.clone();
        let potential = LinearPotential::from_transition(&model);
        Ok(Self { model, potential })
    }

    pub fn model(&self) -> &LinearGaussianSsm {
        &self.model
    }

    pub fn empty_params() -> VarParams {
        VarParams::zeros(ParamLayout::new())
    }
}

impl VariationalFamily for ExactConjugateFamily {
    type State = KalmanState;

    fn dim_x(&self) -> usize {
        self.model.dim_x()
    }

    fn initial_state(&self) -> KalmanState {
        KalmanState { filt: None }
    }

    fn advance(&self, _params: &VarParams, state: &KalmanState, y: &DVector<f64>) -> Result<KalmanState> {
        check_dim(self.model.dim_y(), y.len())?;
        let (pm, pc) = match &state.filt {
            None => kalman_prior(&self.model),
            Some(f) => kalman_predict(&self.model, &f.mean, &f.cov),
        };
        let (mean, cov, _) = kalman_update(&self.model, &pm, &pc, y)?;
        Ok(KalmanState {
            filt: Some(GaussianMoments { mean, cov }),
        })
    }

    fn marginal(&self, _params: &VarParams, state: &KalmanState) -> Result<GaussianNatural> {
        match &state.filt {
            Some(m) => GaussianNatural::from_moments(m),
            None => {
                let (mean, cov) = kalman_prior(&self.model);
                GaussianNatural::from_moments(&GaussianMoments { mean, cov })
            }
        }
    }

    fn potential(&self, _params: &VarParams, x_t: &DVector<f64>) -> DVector<f64> {
        self.potential.flat_at(x_t)
    }

    fn marginal_vjp(&self, _: &VarParams, _: &KalmanState, _: &DVector<f64>, _: &mut [f64]) {}

    fn potential_vjp(&self, _: &VarParams, _: &DVector<f64>, _: &DVector<f64>, _: &mut [f64]) {}
}

/// Per-step `(eta_t, eta~_t)` of the exact family, read off a Kalman filter pass.
pub fn exact_conjugate_mode(model: &dyn StateSpaceModel, filt: &FilterOutput) -> Result<Vec<(GaussianNatural, LinearPotential)>> {
    let m = as_lgssm(model)?;
    let pot = LinearPotential::from_transition(m);
    (0..filt.len())
        .map(|t| {
            let eta = GaussianNatural::from_moments(&GaussianMoments {
                mean: filt.filt_mean[t].clone(),
                cov: filt.filt_cov[t].clone(),
            })?;
            Ok((eta, pot.clone()))
        })
        .collect()
}

/// The exact family as a [`GaussianChain`], for closed-form expectations.
pub fn exact_conjugate_chain(model: &dyn StateSpaceModel, filt: &FilterOutput) -> Result<GaussianChain> {
    let seq = exact_conjugate_mode(model, filt)?;
    let etas: Vec<_> = seq.iter().map(|(e, _)| e.clone()).collect();
    let pots: Vec<_> = seq.iter().skip(1).map(|(_, p)| (p.b.clone(), p.c.clone())).collect();
    GaussianChain::from_natural(&etas, &pots)
}
