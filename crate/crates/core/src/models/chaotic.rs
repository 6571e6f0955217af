use std::any::Any;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use super::{standard_normal_vec, ModelParams, StateSpaceModel};
use crate::error::{check_dim, Error, Result};
use crate::params::ParamLayout;

/// Chaotic recurrent network observed through Student-t noise:
///
/// `X_t = X_{t-1} + (delta / rho) (gamma W tanh(X_{t-1}) - X_{t-1}) + N(0, q I)`,
/// `Y_t = X_t + t_scale * StudentT(t_dof)`, `X_0 ~ N(0, q I)`.
///
/// The learnable parameters are `(rho, gamma)`; `W` is fixed.
#[derive(Clone, Debug)]
pub struct ChaoticRnn {
    pub w: DMatrix<f64>,
    pub delta: f64,
    rho: f64,
    gamma: f64,
    pub q_var: f64,
    pub t_dof: f64,
    pub t_scale: f64,
    params: ModelParams,
}

impl ChaoticRnn {
    pub fn new(w: DMatrix<f64>, delta: f64, rho: f64, gamma: f64, q_var: f64, t_dof: f64, t_scale: f64) -> Result<Self> {
        check_dim(w.nrows(), w.ncols())?;
        if [delta, rho, gamma, q_var, t_dof, t_scale].iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("chaotic RNN scalars must be positive".into()));
        }
        let mut layout = ParamLayout::new();
        layout.push("rho", &[1]);
        layout.push("gamma", &[1]);
        let mut params = ModelParams::zeros(layout);
        params.flat[0] = rho;
        params.flat[1] = gamma;
        Ok(Self {
            w,
            delta,
            rho,
            gamma,
            q_var,
            t_dof,
            t_scale,
            params,
        })
    }

    /// Generative setting of the chaotic-RNN benchmark: `delta = 0.001`,
    /// `rho = 0.025`, `gamma = 2.5`, `Q = 0.01 I`, Student-t with 2 degrees of
    /// freedom and scale 0.1. `W` has i.i.d. `N(0, 1/d)` entries drawn from `seed`.
    pub fn benchmark(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 / d as f64).sqrt();
        let w = DMatrix::from_fn(d, d, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        });
        Self::new(w, 0.001, 0.025, 2.5, 0.01, 2.0, 0.1).expect("benchmark constants are valid")
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn w_tanh(&self, x_prev: &DVector<f64>) -> DVector<f64> {
        &self.w * x_prev.map(f64::tanh)
    }

    fn student_log_pdf(&self, z: f64) -> f64 {
        let nu = self.t_dof;
        ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * std::f64::consts::PI).ln() - self.t_scale.ln()
            - 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
    }
}

impl StateSpaceModel for ChaoticRnn {
    fn dim_x(&self) -> usize {
        self.w.nrows()
    }

    fn dim_y(&self) -> usize {
        self.w.nrows()
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn set_params(&mut self, flat: &DVector<f64>) -> Result<()> {
        check_dim(2, flat.len())?;
        self.params.flat.copy_from(flat);
        self.rho = flat[0];
        self.gamma = flat[1];
        Ok(())
    }

    fn log_initial(&self, x0: &DVector<f64>) -> f64 {
        crate::expfam::diag_gaussian_log_pdf(
            x0.as_slice(),
            &vec![0.0; x0.len()],
            &vec![self.q_var; x0.len()],
        )
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        standard_normal_vec(self.dim_x(), rng) * self.q_var.sqrt()
    }

    fn transition_mean(&self, x_prev: &DVector<f64>) -> DVector<f64> {
        let a = self.delta / self.rho;
        x_prev + (self.w_tanh(x_prev) * self.gamma - x_prev) * a
    }

    fn transition_var(&self) -> DVector<f64> {
        DVector::from_element(self.dim_x(), self.q_var)
    }

    fn sample_emission(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let chi = ChiSquared::new(self.t_dof).expect("positive dof");
        DVector::from_iterator(
            x.len(),
            x.iter().map(|xk| {
                let z: f64 = StandardNormal.sample(rng);
                let c: f64 = chi.sample(rng);
                xk + self.t_scale * z / (c / self.t_dof).sqrt()
            }),
        )
    }

    fn log_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.iter()
            .zip(y.iter())
            .filter(|(_, yk)| !yk.is_nan())
            .map(|(xk, yk)| self.student_log_pdf((yk - xk) / self.t_scale))
            .sum()
    }

    fn accumulate_grad_log_m(&self, x_prev: &DVector<f64>, x: &DVector<f64>, t: usize, weight: f64, out: &mut [f64]) {
        if t == 0 {
            return;
        }
        let a = self.delta / self.rho;
        let u = self.w_tanh(x_prev);
        let (mut d_rho, mut d_gamma) = (0.0, 0.0);
        for k in 0..x.len() {
            let inner = self.gamma * u[k] - x_prev[k];
            let r = (x[k] - x_prev[k] - a * inner) / self.q_var;
            d_rho += r * (-a / self.rho) * inner;
            d_gamma += r * a * u[k];
        }
        out[0] += weight * d_rho;
        out[1] += weight * d_gamma;
    }

    fn accumulate_grad_log_g(&self, _x: &DVector<f64>, _y: &DVector<f64>, _weight: f64, _out: &mut [f64]) {}

    fn as_any(&self) -> &dyn Any {
        self
    }
}
