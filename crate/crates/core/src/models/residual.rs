use std::any::Any;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{standard_normal_vec, ModelParams, StateSpaceModel};
use crate::error::{check_dim, Result};
use crate::expfam::NEG_HALF_LN_2PI;
use crate::gradients::tape::Tape;
use crate::nn::{Activation, MlpArch, MlpParams};
use crate::params::ParamLayout;

/// `X_t = X_{t-1} + f(X_{t-1}) + N(0, diag(exp(log_q)))`,
/// `Y_t = g(X_t) + N(0, diag(exp(log_r)))`, `X_0 ~ N(0, q0 I)`,
/// with `f` and `g` tanh MLPs. All network weights and both log-variances are
/// learnable.
#[derive(Clone, Debug)]
pub struct ResidualNonlinearSsm {
    dx: usize,
    dy: usize,
    f_net: MlpParams,
    g_net: MlpParams,
    log_q: usize,
    log_r: usize,
    pub q0_var: f64,
    q_var: DVector<f64>,
    r_var: DVector<f64>,
    params: ModelParams,
}

impl ResidualNonlinearSsm {
    /// Builds the model with `hidden` tanh layers in both networks, weights
    /// initialised from `seed` and scaled by `gain`, and both noise variances
    /// set to `noise_var`.
    pub fn new(dx: usize, dy: usize, hidden: &[usize], gain: f64, noise_var: f64, seed: u64) -> Self {
        let mut layout = ParamLayout::new();
        let arch = |i, o| {
            let mut s = vec![i];
            s.extend_from_slice(hidden);
            s.push(o);
            MlpArch::new(s, Activation::Tanh)
        };
        let f_net = arch(dx, dx).register(&mut layout, "f");
        let g_net = arch(dx, dy).register(&mut layout, "g");
        let log_q = layout.push("log_q", &[dx]);
        let log_r = layout.push("log_r", &[dy]);
        let mut params = ModelParams::zeros(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // small residual at init: the transition starts close to the identity
        f_net.init_with_output_gain(params.flat.as_mut_slice(), gain, 0.1 * gain, &mut rng);
        g_net.init(params.flat.as_mut_slice(), gain, &mut rng);
        params.flat.rows_mut(log_q, dx).fill(noise_var.ln());
        params.flat.rows_mut(log_r, dy).fill(noise_var.ln());
        let mut m = Self {
            dx,
            dy,
            f_net,
            g_net,
            log_q,
            log_r,
            q0_var: 1.0,
            q_var: DVector::zeros(dx),
            r_var: DVector::zeros(dy),
            params,
        };
        m.refresh();
        m
    }

    /// Two hidden layers of 32 units.
    pub fn default_arch(dx: usize, dy: usize, seed: u64) -> Self {
        Self::new(dx, dy, &[32, 32], 1.0, 0.1, seed)
    }

    fn refresh(&mut self) {
        let flat = self.params.flat.as_slice();
        self.q_var = DVector::from_iterator(self.dx, flat[self.log_q..self.log_q + self.dx].iter().map(|v| v.exp()));
        self.r_var = DVector::from_iterator(self.dy, flat[self.log_r..self.log_r + self.dy].iter().map(|v| v.exp()));
    }

    pub fn emission_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        self.g_net.forward(self.params.flat.as_slice(), x)
    }

    pub fn emission_var(&self) -> &DVector<f64> {
        &self.r_var
    }
}

impl StateSpaceModel for ResidualNonlinearSsm {
    fn dim_x(&self) -> usize {
        self.dx
    }

    fn dim_y(&self) -> usize {
        self.dy
    }

    fn params(&self) -> &ModelParams {
        &self.params
    }

    fn set_params(&mut self, flat: &DVector<f64>) -> Result<()> {
        check_dim(self.params.len(), flat.len())?;
        self.params.flat.copy_from(flat);
        self.refresh();
        Ok(())
    }

    fn log_initial(&self, x0: &DVector<f64>) -> f64 {
        let d = x0.len() as f64;
        d * (NEG_HALF_LN_2PI - 0.5 * self.q0_var.ln()) - 0.5 * x0.norm_squared() / self.q0_var
    }

    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        standard_normal_vec(self.dx, rng) * self.q0_var.sqrt()
    }

    fn transition_mean(&self, x_prev: &DVector<f64>) -> DVector<f64> {
        x_prev + self.f_net.forward(self.params.flat.as_slice(), x_prev)
    }

    fn transition_var(&self) -> DVector<f64> {
        self.q_var.clone()
    }

    fn sample_emission(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let z = standard_normal_vec(self.dy, rng);
        self.emission_mean(x) + z.component_mul(&self.r_var.map(f64::sqrt))
    }

    fn log_g(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mean = self.emission_mean(x);
        (0..self.dy)
            .filter(|&k| !y[k].is_nan())
            .map(|k| {
                let r = y[k] - mean[k];
                NEG_HALF_LN_2PI - 0.5 * self.r_var[k].ln() - 0.5 * r * r / self.r_var[k]
            })
            .sum()
    }

    fn accumulate_grad_log_m(&self, x_prev: &DVector<f64>, x: &DVector<f64>, t: usize, weight: f64, out: &mut [f64]) {
        if t == 0 {
            return;
        }
        let mut tape = Tape::new(self.params.flat.as_slice());
        let xi = tape.input(x_prev.clone());
        let f = self.f_net.on_tape(&mut tape, xi);
        let mut seed = DVector::zeros(self.dx);
        for k in 0..self.dx {
            let r = x[k] - x_prev[k] - tape.value(f)[k];
            seed[k] = weight * r / self.q_var[k];
            out[self.log_q + k] += weight * (-0.5 + 0.5 * r * r / self.q_var[k]);
        }
        tape.vjp_into(f, &seed, out);
    }

    fn accumulate_grad_log_g(&self, x: &DVector<f64>, y: &DVector<f64>, weight: f64, out: &mut [f64]) {
        let mut tape = Tape::new(self.params.flat.as_slice());
        let xi = tape.input(x.clone());
        let g = self.g_net.on_tape(&mut tape, xi);
        let mut seed = DVector::zeros(self.dy);
        for k in 0..self.dy {
            if y[k].is_nan() {
                continue;
            }
            let r = y[k] - tape.value(g)[k];
            seed[k] = weight * r / self.r_var[k];
            out[self.log_r + k] += weight * (-0.5 + 0.5 * r * r / self.r_var[k]);
        }
        tape.vjp_into(g, &seed, out);
    }

    fn as_any(&self) -> &dyn Any {
        self
    }
}
