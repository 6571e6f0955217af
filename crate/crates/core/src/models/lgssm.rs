use std::any::Any;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::{standard_normal_vec, ModelParams, StateSpaceModel};
use crate::error::{check_dim, Error, Result};
use crate::expfam::NEG_HALF_LN_2PI;
use crate::params::ParamLayout;

/// `X_t = F X_{t-1} + N(0, q I)`, `Y_t = G X_t + N(0, r I)`, `X_0 ~ N(mu0, q0 I)`.
/// The learnable parameters are `(F, G)`; the noise levels are fixed.
#[derive(Clone, Debug)]
pub struct LinearGaussianSsm {
    f: DMatrix<f64>,
    g: DMatrix<f64>,
    pub q_var: f64,
    pub r_var: f64,
    pub mu0: DVector<f64>,
    pub q0_var: f64,
    params: ModelParams,
}

impl LinearGaussianSsm {
    pub fn new(f: DMatrix<f64>, g: DMatrix<f64>, q_var: f64, r_var: f64, mu0: DVector<f64>, q0_var: f64) -> Result<Self> {
        let dx = f.nrows();
        check_dim(dx, f.ncols())?;
        check_dim(dx, g.ncols())?;
        check_dim(dx, mu0.len())?;
        if !(q_var > 0.0 && r_var > 0.0 && q0_var > 0.0) {
            return Err(Error::Config("noise variances must be positive".into()));
        }
        let mut layout = ParamLayout::new();
        layout.push("F", &[dx, dx]);
        layout.push("G", &[g.nrows(), dx]);
        let mut params = ModelParams::zeros(layout);
        params.set_matrix("F", &f);
        params.set_matrix("G", &g);
        Ok(Self {
            f,
            g,
            q_var,
            r_var,
            mu0,
            q0_var,
            params,
        })
    }

    /// Noise levels used in the streaming experiments: transition variance 0.1,
    /// emission variance 0.25, `X_0 ~ N(0, I)`.
    pub fn with_default_noise(f: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let dx = f.nrows();
        Self::new(f, g, 0.1, 0.25, DVector::zeros(dx), 1.0)
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn q_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim_x(), self.dim_x()) * self.q_var
    }

    pub fn r_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim_y(), self.dim_y()) * self.r_var
    }

    pub fn q0_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim_x(), self.dim_x()) * self.q0_var
    }
}

impl StateSpaceModel for LinearGaussianSsm {
    fn dim_x(&self) -> usize {
        self.f.nrows()
    }

    fn dim_y(&self) -> usize {
        self.g.nrows()
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn set_params(&mut self, flat: &DVector<f64>) -> Result<()> {
        check_dim(self.params.len(), flat.len())?;
        self.params.flat.copy_from(flat);
        self.f = self.params.matrix("F");
        self.g = self.params.matrix("G");
        Ok(())
    }

    fn log_initial(&self, x0: &DVector<f64>) -> f64 {
        let d = x0.len() as f64;
        let sq = (x0 - &self.mu0).norm_squared();
        d * NEG_HALF_LN_2PI - 0.5 * d * self.q0_var.ln() - 0.5 * sq / self.q0_var
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        &self.mu0 + standard_normal_vec(self.dim_x(), rng) * self.q0_var.sqrt()
    }

    fn transition_mean(&self, x_prev: &DVector<f64>) -> DVector<f64> {
        &self.f * x_prev
    }

    fn transition_var(&self) -> DVector<f64> {
        DVector::from_element(self.dim_x(), self.q_var)
    }

    fn log_m(&self, x_prev: &DVector<f64>, x: &DVector<f64>, t: usize) -> f64 {
        if t == 0 {
            return self.log_initial(x);
        }
        let dx = self.dim_x();
        let mut sq = 0.0;
        for k in 0..dx {
            let mut r = x[k];
            for l in 0..dx {
                r -= self.f[(k, l)] * x_prev[l];
            }
            sq += r * r;
        }
        dx as f64 * (NEG_HALF_LN_2PI - 0.5 * self.q_var.ln()) - 0.5 * sq / self.q_var
    }

    fn sample_emission(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        &self.g * x + standard_normal_vec(self.dim_y(), rng) * self.r_var.sqrt()
    }

    fn log_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.dim_y() {
            if y[k].is_nan() {
                continue;
            }
            let mut r = y[k];
            for l in 0..self.dim_x() {
                r -= self.g[(k, l)] * x[l];
            }
            acc += NEG_HALF_LN_2PI - 0.5 * self.r_var.ln() - 0.5 * r * r / self.r_var;
        }
        acc
    }

    fn accumulate_grad_log_m(&self, x_prev: &DVector<f64>, x: &DVector<f64>, t: usize, weight: f64, out: &mut [f64]) {
        if t == 0 {
            return;
        }
        let dx = self.dim_x();
        for k in 0..dx {
            let mut r = x[k];
            for l in 0..dx {
                r -= self.f[(k, l)] * x_prev[l];
            }
            let s = weight * r / self.q_var;
            for l in 0..dx {
                out[l * dx + k] += s * x_prev[l];
            }
        }
    }

    fn accumulate_grad_log_g(&self, x: &DVector<f64>, y: &DVector<f64>, weight: f64, out: &mut [f64]) {
        let (dx, dy) = (self.dim_x(), self.dim_y());
        let base = dx * dx;
        for k in 0..dy {
            if y[k].is_nan() {
                continue;
            }
            let mut r = y[k];
            for l in 0..dx {
                r -= self.g[(k, l)] * x[l];
            }
            let s = weight * r / self.r_var;
            for l in 0..dx {
                out[base + l * dy + k] += s * x[l];
            }
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
