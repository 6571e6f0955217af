use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{backward_kernel_from_flat, log_potential_flat, PotentialClip, VarParams, VariationalFamily};
use crate::error::{check_dim, Result};
use crate::expfam::{flat_len, suff_stat_flat_into, GaussianNatural};
use crate::gradients::tape::{natural_from_raw, raw_natural_len, NodeId, Tape};
use crate::nn::{Activation, MlpArch, MlpParams};
use crate::params::ParamLayout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmortizedConfig {
    pub dx: usize,
    pub dy: usize,
    /// Amortizer width `h`.
    pub hidden: usize,
    pub marginal_hidden: Vec<usize>,
    pub potential_hidden: Vec<usize>,
    /// Number of amortizer steps unrolled when differentiating `eta_t`.
    pub truncation_window: usize,
    pub marginal_eps: f64,
    /// Initial spectral scale of the recurrent matrix.
    pub recurrent_init: f64,
}

impl AmortizedConfig {
    pub fn new(dx: usize, dy: usize) -> Self {
        Self {
            dx,
            dy,
            hidden: 32,
            marginal_hidden: vec![32],
            potential_hidden: vec![32],
            truncation_window: 2,
            marginal_eps: 1e-6,
            recurrent_init: 0.5,
        }
    }
}

/// `a_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmortizerState {
    pub a: DVector<f64>,
}

/// The inputs needed to recompute `a_t` from `a_{t-w}` under new parameters:
/// `a_t = advance(..advance(start, ys[0]).., ys[w-1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmortizerWindow {
    pub start: DVector<f64>,
    pub ys: Vec<DVector<f64>>,
}

/// Rolling record of the last `w + 1` amortizer states and the `w`
/// observations between them. The first state is `a_{-1} = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmortizerTrace {
    pub states: VecDeque<AmortizerState>,
    pub ys: VecDeque<DVector<f64>>,
}

impl AmortizerTrace {
    pub fn current(&self) -> &AmortizerState {
        self.states.back().expect("trace is never empty")
    }

    pub fn window(&self) -> AmortizerWindow {
        AmortizerWindow {
            start: self.states.front().expect("trace is never empty").a.clone(),
            ys: self.ys.iter().cloned().collect(),
        }
    }
}

/// Recurrent amortizer `a_t = tanh(W a_{t-1} + U y_t + b)` with a marginal head
/// `eta_t = f(a_t)` and a potential head `eta~(x_t) = g(x_t)`, both MLPs ending
/// in the negative-definite natural-parameter transform.
#[derive(Clone, Debug)]
pub struct AmortizedFamily {
    pub config: AmortizedConfig,
    layout: ParamLayout,
    w_off: usize,
    u_off: usize,
    b_off: usize,
    marginal_head: MlpParams,
    potential_head: MlpParams,
}

/// Missing coordinates enter the amortizer as zeros.
fn sanitize(y: &DVector<f64>) -> DVector<f64> {
    y.map(|v| if v.is_nan() { 0.0 } else { v })
}

impl AmortizedFamily {
    pub fn new(config: AmortizedConfig) -> Self {
        let (h, dx, dy) = (config.hidden, config.dx, config.dy);
        let mut layout = ParamLayout::new();
        let w_off = layout.push("W", &[h, h]);
        let u_off = layout.push("U", &[h, dy]);
        let b_off = layout.push("b", &[h]);
        let k = raw_natural_len(dx);
        let mut sizes = vec![h];
        sizes.extend_from_slice(&config.marginal_hidden);
        sizes.push(k);
        let marginal_head = MlpArch::new(sizes, Activation::Tanh).register(&mut layout, "head_marginal");
        let mut sizes = vec![dx];
        sizes.extend_from_slice(&config.potential_hidden);
        sizes.push(k);
        let potential_head = MlpArch::new(sizes, Activation::Tanh).register(&mut layout, "head_potential");
        Self {
            config,
            layout,
            w_off,
            u_off,
            b_off,
            marginal_head,
            potential_head,
        }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    pub fn zero_params(&self) -> VarParams {
        VarParams::zeros(self.layout.clone())
    }

    /// Random initialisation: `W` scaled to spectral norm `recurrent_init`,
    /// Glorot-style `U` and heads, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> VarParams {
        let (h, dy) = (self.config.hidden, self.config.dy);
        let mut p = self.zero_params();
        let w = DMatrix::from_fn(h, h, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = super::spectral_norm(&w);
        p.set_matrix("W", &(w * (self.config.recurrent_init / s.max(1e-300))));
        let sd = (2.0 / (h + dy) as f64).sqrt();
        for v in p.slice_mut("U") {
            *v = sd * rng.sample::<f64, _>(StandardNormal);
        }
        self.marginal_head
            .init_with_output_gain(p.flat.as_mut_slice(), 1.0, super::HEAD_OUTPUT_GAIN, rng);
        self.potential_head
            .init_with_output_gain(p.flat.as_mut_slice(), 1.0, super::HEAD_OUTPUT_GAIN, rng);
        p
    }

    /// `a' = tanh(W a + U y + b)`.
    pub fn advance(&self, params: &VarParams, a: &AmortizerState, y: &DVector<f64>) -> AmortizerState {
        let h = self.config.hidden;
        let p = params.flat.as_slice();
        let y = sanitize(y);
        let w = nalgebra::DMatrixView::from_slice(&p[self.w_off..self.w_off + h * h], h, h);
        let u = nalgebra::DMatrixView::from_slice(&p[self.u_off..self.u_off + h * self.config.dy], h, self.config.dy);
        let b = DVector::from_column_slice(&p[self.b_off..self.b_off + h]);
        let pre = w * &a.a + u * y + b;
        AmortizerState { a: pre.map(f64::tanh) }
    }

    pub fn initial_amortizer(&self) -> AmortizerState {
        AmortizerState {
            a: DVector::zeros(self.config.hidden),
        }
    }

    /// `eta_t = f(a_t)`.
    pub fn marginal_params(&self, params: &VarParams, a: &AmortizerState) -> GaussianNatural {
        let raw = self.marginal_head.forward(params.flat.as_slice(), &a.a);
        let flat = natural_from_raw(self.config.dx, raw.as_slice(), self.config.marginal_eps);
        GaussianNatural::from_flat(self.config.dx, flat.as_slice()).expect("head width matches")
    }

    pub fn potential_flat(&self, params: &VarParams, x_t: &DVector<f64>) -> DVector<f64> {
        let raw = self.potential_head.forward(params.flat.as_slice(), x_t);
        natural_from_raw(self.config.dx, raw.as_slice(), 0.0)
    }

    /// `eta~(x_t)`; its quadratic part is only negative semidefinite in general.
    pub fn potential_params(&self, params: &VarParams, x_t: &DVector<f64>) -> GaussianNatural {
        GaussianNatural::from_flat(self.config.dx, self.potential_flat(params, x_t).as_slice()).expect("head width matches")
    }

    pub fn backward_kernel(&self, params: &VarParams, eta_prev: &GaussianNatural, x_t: &DVector<f64>) -> Result<GaussianNatural> {
        backward_kernel_from_flat(eta_prev, self.potential_flat(params, x_t).as_slice())
    }

    /// `log rho(x_prev, x_t) = <eta~(x_t), T(x_prev)>`, clipped when requested.
    pub fn log_potential(&self, params: &VarParams, x_prev: &DVector<f64>, x_t: &DVector<f64>, clip: Option<&PotentialClip>) -> f64 {
        log_potential_flat(self.potential_flat(params, x_t).as_slice(), x_prev.as_slice(), clip)
    }

    /// Re-executes `window` under `params`; the start state is a constant.
    pub fn replay(&self, params: &VarParams, window: &AmortizerWindow) -> AmortizerState {
        window
            .ys
            .iter()
            .fold(AmortizerState { a: window.start.clone() }, |a, y| self.advance(params, &a, y))
    }

    pub fn marginal_from_window(&self, params: &VarParams, window: &AmortizerWindow) -> GaussianNatural {
        self.marginal_params(params, &self.replay(params, window))
    }

    fn marginal_on_tape(&self, tape: &mut Tape<'_>, window: &AmortizerWindow) -> NodeId {
        let (h, dy) = (self.config.hidden, self.config.dy);
        let mut a = tape.input(window.start.clone());
        for y in &window.ys {
            let yi = tape.input(sanitize(y));
            let wa = tape.affine(a, self.w_off, None, h, h);
            let uy = tape.affine(yi, self.u_off, Some(self.b_off), h, dy);
            let s = tape.add(wa, uy);
            a = tape.tanh(s);
        }
        let raw = self.marginal_head.on_tape(tape, a);
        tape.natural_head(raw, self.config.dx, self.config.marginal_eps)
    }

    fn potential_on_tape(&self, tape: &mut Tape<'_>, x_t: &DVector<f64>) -> NodeId {
        let xi = tape.input(x_t.clone());
        let raw = self.potential_head.on_tape(tape, xi);
        tape.natural_head(raw, self.config.dx, 0.0)
    }

    /// Adds `(d eta_t / d phi)^T cot` for the marginal at the end of `window`.
    pub fn marginal_vjp_window(&self, params: &VarParams, window: &AmortizerWindow, cot: &DVector<f64>, out: &mut [f64]) {
        let mut tape = Tape::new(params.flat.as_slice());
        let eta = self.marginal_on_tape(&mut tape, window);
        tape.vjp_into(eta, cot, out);
    }

    /// `grad_phi log q_t(x)`, the marginal being re-executed from `window`.
    pub fn grad_log_marginal(&self, params: &VarParams, window: &AmortizerWindow, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.config.dx, x.len())?;
        let eta = self.marginal_from_window(params, window);
        let cot = score_cotangent(&eta, x)?;
        let mut g = DVector::zeros(self.num_params());
        self.marginal_vjp_window(params, window, &cot, g.as_mut_slice());
        Ok(g)
    }

    /// `grad_phi log q_{t-1|t}(x_t, x_prev)`, with `eta_{t-1}` re-executed from
    /// `prev_window`.
    pub fn grad_log_backward(
        &self,
        params: &VarParams,
        prev_window: &AmortizerWindow,
        x_t: &DVector<f64>,
        x_prev: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        check_dim(self.config.dx, x_t.len())?;
        check_dim(self.config.dx, x_prev.len())?;
        let eta_prev = self.marginal_from_window(params, prev_window);
        let kernel = self.backward_kernel(params, &eta_prev, x_t)?;
        let cot = score_cotangent(&kernel, x_prev)?;
        let mut g = DVector::zeros(self.num_params());
        self.marginal_vjp_window(params, prev_window, &cot, g.as_mut_slice());
        self.potential_vjp(params, x_t, &cot, g.as_mut_slice());
        Ok(g)
    }

    /// Exact log-density of the backward kernel, used by tests and examples.
    pub fn log_backward(&self, params: &VarParams, eta_prev: &GaussianNatural, x_t: &DVector<f64>, x_prev: &DVector<f64>) -> Result<f64> {
        self.backward_kernel(params, eta_prev, x_t)?.log_density(x_prev)
    }
}

/// `T(x) - E_eta[T]` in flat layout: the score of `log q` in natural coordinates.
pub fn score_cotangent(eta: &GaussianNatural, x: &DVector<f64>) -> Result<DVector<f64>> {
    let d = eta.dim();
    let e = eta.expected_stats()?;
    let mut out = DVector::zeros(flat_len(d));
    suff_stat_flat_into(x.as_slice(), out.as_mut_slice());
    for k in 0..d {
        out[k] -= e.t1[k];
    }
    for (o, v) in out.as_mut_slice()[d..].iter_mut().zip(e.t2.as_slice()) {
        *o -= v;
    }
    Ok(out)
}

impl VariationalFamily for AmortizedFamily {
    type State = AmortizerTrace;

    fn dim_x(&self) -> usize {
        self.config.dx
    }

    fn initial_state(&self) -> AmortizerTrace {
        AmortizerTrace {
            states: VecDeque::from(vec![self.initial_amortizer()]),
            ys: VecDeque::new(),
        }
    }

    fn advance(&self, params: &VarParams, state: &AmortizerTrace, y: &DVector<f64>) -> Result<AmortizerTrace> {
        check_dim(self.config.dy, y.len())?;
        let mut next = state.clone();
        next.states.push_back(self.advance(params, state.current(), y));
        next.ys.push_back(sanitize(y));
        while next.states.len() > self.config.truncation_window + 1 {
            next.states.pop_front();
            next.ys.pop_front();
        }
        Ok(next)
    }

    fn marginal(&self, params: &VarParams, state: &AmortizerTrace) -> Result<GaussianNatural> {
        Ok(self.marginal_params(params, state.current()))
    }

    fn potential(&self, params: &VarParams, x_t: &DVector<f64>) -> DVector<f64> {
        self.potential_flat(params, x_t)
    }

    fn marginal_vjp(&self, params: &VarParams, state: &AmortizerTrace, cot: &DVector<f64>, out: &mut [f64]) {
        self.marginal_vjp_window(params, &state.window(), cot, out);
    }

    fn potential_vjp(&self, params: &VarParams, x_t: &DVector<f64>, cot: &DVector<f64>, out: &mut [f64]) {
        let mut tape = Tape::new(params.flat.as_slice());
        let eta = self.potential_on_tape(&mut tape, x_t);
        tape.vjp_into(eta, cot, out);
    }

    fn marginal_jacobian_t(&self, params: &VarParams, state: &AmortizerTrace) -> DMatrix<f64> {
        let mut tape = Tape::new(params.flat.as_slice());
        let eta = self.marginal_on_tape(&mut tape, &state.window());
        tape.jacobian_transpose(eta)
    }
}
