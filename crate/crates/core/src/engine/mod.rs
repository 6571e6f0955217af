//! Recursive Monte Carlo estimation of the ELBO and its gradients.
//!
//! Each step draws i.i.d. particles from the current marginal `q_t`, attaches
//! to every particle the statistics `(H, G, F)` by self-normalized importance
//! sampling over the previous particles, and reads the ELBO and gradient
//! estimates off the cloud.
//!
//! The `phi`-gradient of the backward kernel splits into the marginal part
//! `J_{t-1}^T (T(x_prev) - m)` and the potential part
//! `J_pot(x_t)^T (T(x_prev) - m)`, so for every new particle the weighted sum
//! over previous particles is first collapsed into a single cotangent `c_i` in
//! natural-parameter space and only then pulled back to `phi`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{diag_gaussian_log_pdf, flat_len, suff_stat_flat_into, GaussianNatural};
use crate::models::StateSpaceModel;
use crate::variational::{backward_kernel_from_flat, potential_sup, PotentialClip, VarParams, VariationalFamily};

/// Particles `xi_t^i` with their statistics.
///
/// `g_stat` and `f_stat` hold one column per particle (`dim(phi) x N` and
/// `dim(theta) x N`); they have zero rows when the corresponding gradient is
/// switched off.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParticleCloud {
    pub t: usize,
    pub xi: Vec<DVector<f64>>,
    /// Column `i` is `T(xi^i)` in flat layout.
    pub suff: DMatrix<f64>,
    pub log_q_marginal: DVector<f64>,
    pub h_stat: DVector<f64>,
    pub g_stat: DMatrix<f64>,
    pub f_stat: DMatrix<f64>,
    pub eta_t: GaussianNatural,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.len() as f64;
        self.xi.iter().fold(DVector::zeros(self.eta_t.dim()), |a, x| a + x) / n
    }

    /// Fresh particles from `eta` with all statistics zero.
    pub fn from_particles(t: usize, eta: GaussianNatural, xi: Vec<DVector<f64>>, dim_phi: usize, dim_theta: usize) -> Result<Self> {
        let n = xi.len();
        let d = eta.dim();
        let a = eta.log_normalizer()?;
        let flat = eta.to_flat();
        let mut suff = DMatrix::zeros(flat_len(d), n);
        let mut log_q = DVector::zeros(n);
        for (i, x) in xi.iter().enumerate() {
            suff_stat_flat_into(x.as_slice(), suff.column_mut(i).as_mut_slice());
            log_q[i] = flat.dot(&suff.column(i)) - a;
        }
        Ok(Self {
            t,
            xi,
            suff,
            log_q_marginal: log_q,
            h_stat: DVector::zeros(n),
            g_stat: DMatrix::zeros(dim_phi, n),
            f_stat: DMatrix::zeros(dim_theta, n),
            eta_t: eta,
        })
    }
}

/// Normalized backward weights `w[i][j]` over previous particles `j` for each
/// new particle `i`, with the unnormalized log-weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    pub w: DMatrix<f64>,
    pub log_unnorm: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOutput {
    pub elbo: f64,
    /// Standard error of `elbo` across particles.
    pub elbo_stderr: f64,
    pub grad_phi: DVector<f64>,
    pub grad_theta: DVector<f64>,
}

/// Upper bound on `<eta~(x_t), T(x_prev)>` used by accept-reject sampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ArBound {
    /// `log eps+` of the configured potential clip; the sampled law is that of
    /// the clipped potentials.
    Clip,
    /// `sup_x <eta~, T(x)>`, available when the potential's quadratic part is
    /// negative definite; rows without it fall back to categorical draws.
    Analytic,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sampler {
    Categorical,
    AcceptReject(ArBound),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum UpdateMethod {
    /// `O(N^2)` weighted sums over all previous particles.
    Full,
    /// `M` backward indices per particle.
    Sampled { m: usize, sampler: Sampler },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub n_particles: usize,
    pub method: UpdateMethod,
    /// Centre the bracket of the `G` update on the new particle's `H`.
    pub cv_g: bool,
    /// Centre the score weights of the final `phi`-gradient: `H` on its particle
    /// mean, `-log q_t` on its exact mean.
    pub cv_estimate: bool,
    /// Weight the marginal score by `H - log q_t` rather than `H`; the
    /// `- log q_t` part is the entropy's contribution to the gradient.
    pub entropy_score: bool,
    pub phi_grad: bool,
    pub theta_grad: bool,
    pub clip: Option<PotentialClip>,
}

impl EngineConfig {
    pub fn new(n_particles: usize) -> Self {
        Self {
            n_particles,
            method: UpdateMethod::Full,
            cv_g: true,
            cv_estimate: true,
            entropy_score: true,
            phi_grad: true,
            theta_grad: true,
            clip: None,
        }
    }

    pub fn sampled(mut self, m: usize, sampler: Sampler) -> Self {
        self.method = UpdateMethod::Sampled { m, sampler };
        self
    }
}

/// Family state and particle cloud carried between steps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EngineState<S> {
    pub var: S,
    pub cloud: Option<ParticleCloud>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutput {
    pub t: usize,
    pub estimate: EstimatorOutput,
    /// Particle mean of `xi_t`.
    pub filter_mean: DVector<f64>,
    /// `(1/N) sum_i sum_j w[i][j] xi_{t-1}^j`, absent at `t = 0`.
    pub smooth_prev_mean: Option<DVector<f64>>,
    pub proposals: u64,
    pub fallbacks: u64,
}

/// What an update needs besides the two clouds.
pub struct UpdateContext<'a, S> {
    pub model: &'a dyn StateSpaceModel,
    pub params: &'a VarParams,
    /// Family state that produced the previous cloud's marginal.
    pub prev_state: &'a S,
    pub y: &'a DVector<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateDiagnostics {
    pub smooth_prev_mean: DVector<f64>,
    pub proposals: u64,
    pub fallbacks: u64,
}

pub struct Engine<F> {
    pub config: EngineConfig,
    pub family: F,
}

/// Per-row quantities shared by both update methods.
struct RowSetup {
    pot: DVector<f64>,
    /// `A(eta_{t-1} + eta~_i)`.
    a_kernel: f64,
    /// `E[T]` under the kernel, present when `phi`-gradients are needed.
    m_kernel: Option<DVector<f64>>,
    log_g: f64,
}

struct RowResult {
    h: f64,
    c: Option<DVector<f64>>,
    smooth: DVector<f64>,
    f: Option<DVector<f64>>,
    /// Full method: normalized weights of the row. Sampled method: the averaged
    /// previous `G` columns.
    w: Option<DVector<f64>>,
    g: Option<DVector<f64>>,
    proposals: u64,
    fallback: bool,
}

/// Rows processed together in the full method; bounds the dense weight block.
const BLOCK_ELEMS: usize = 1 << 22;

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-row inputs of the full update's fused pass over previous particles.
struct RowInputs<'a> {
    suff: &'a [f64],
    means: &'a [f64],
    h_prev: &'a [f64],
    log_q_prev: &'a [f64],
    pot: &'a [f64],
    x: &'a [f64],
    inv_var: &'a [f64],
    shift: f64,
    base: f64,
}

impl RowInputs<'_> {
    /// Writes log-weights into `lw` and H-summands into `hv`; returns the
    /// largest log-weight. Fixed sizes let the short inner loops unroll.
    #[inline]
    fn fill<const K: usize, const D: usize>(&self, lw: &mut [f64], hv: &mut [f64]) -> f64 {
        let pot: &[f64; K] = self.pot.try_into().expect("potential length");
        let x: &[f64; D] = self.x.try_into().expect("state length");
        let iv: &[f64; D] = self.inv_var.try_into().expect("variance length");
        let mut top = f64::NEG_INFINITY;
        let cols = self.suff.chunks_exact(K).zip(self.means.chunks_exact(D));
        for ((((col, mean), (l, h)), hp), lq) in cols.zip(lw.iter_mut().zip(hv.iter_mut())).zip(self.h_prev).zip(self.log_q_prev) {
            let mut dot = 0.0;
            for r in 0..K {
                dot += col[r] * pot[r];
            }
            let mut q = 0.0;
            for r in 0..D {
                let e = x[r] - mean[r];
                q += e * e * iv[r];
            }
            *l = dot + self.shift;
            top = top.max(*l);
            *h = hp + self.base - 0.5 * q - lq - *l;
        }
        top
    }

    fn fill_dyn(&self, k: usize, d: usize, lw: &mut [f64], hv: &mut [f64]) -> f64 {
        let mut top = f64::NEG_INFINITY;
        let cols = self.suff.chunks_exact(k).zip(self.means.chunks_exact(d));
        for ((((col, mean), (l, h)), hp), lq) in cols.zip(lw.iter_mut().zip(hv.iter_mut())).zip(self.h_prev).zip(self.log_q_prev) {
            let dot: f64 = col.iter().zip(self.pot).map(|(a, b)| a * b).sum();
            let q: f64 = self.x.iter().zip(mean).zip(self.inv_var).map(|((a, b), iv)| (a - b) * (a - b) * iv).sum();
            *l = dot + self.shift;
            top = top.max(*l);
            *h = hp + self.base - 0.5 * q - lq - *l;
        }
        top
    }
}

/// Replaces log-weights by their softmax given their maximum `top`; false when
/// the row is degenerate.
fn softmax_in_place(v: &mut [f64], top: f64) -> bool {
    if !top.is_finite() {
        return false;
    }
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - top).exp();
        z += *x;
    }
    if !z.is_finite() {
        return false;
    }
    let inv = 1.0 / z;
    v.iter_mut().for_each(|x| *x *= inv);
    true
}

#[inline]
fn column_dot(m: &DMatrix<f64>, j: usize, v: &[f64]) -> f64 {
    let k = m.nrows();
    let col = &m.as_slice()[j * k..(j + 1) * k];
    col.iter().zip(v).map(|(a, b)| a * b).sum()
}

impl<F: VariationalFamily> Engine<F> {
    pub fn new(config: EngineConfig, family: F) -> Self {
        Self { config, family }
    }

    pub fn initial_state(&self) -> EngineState<F::State> {
        EngineState {
            var: self.family.initial_state(),
            cloud: None,
        }
    }

    fn dim_phi(&self, params: &VarParams) -> usize {
        if self.config.phi_grad {
            params.len()
        } else {
            0
        }
    }

    fn dim_theta(&self, model: &dyn StateSpaceModel) -> usize {
        if self.config.theta_grad {
            model.num_params()
        } else {
            0
        }
    }

    /// Draws `N` particles from `eta` with zero statistics.
    pub fn draw_cloud(&self, t: usize, eta: GaussianNatural, model: &dyn StateSpaceModel, params: &VarParams, rng: &mut dyn RngCore) -> Result<ParticleCloud> {
        if self.config.n_particles == 0 {
            return Err(Error::Config("at least one particle is required".into()));
        }
        let xi = eta.sample(rng, self.config.n_particles)?;
        ParticleCloud::from_particles(t, eta, xi, self.dim_phi(params), self.dim_theta(model))
    }

    /// Time-0 cloud: `H = log chi + log g_0`, `G = 0`, `F = grad_theta H`.
    pub fn init_cloud(
        &self,
        model: &dyn StateSpaceModel,
        params: &VarParams,
        state0: &F::State,
        y0: &DVector<f64>,
        rng: &mut dyn RngCore,
    ) -> Result<ParticleCloud> {
        let eta = self.family.marginal(params, state0)?;
        let mut cloud = self.draw_cloud(0, eta, model, params, rng)?;
        self.fill_initial(&mut cloud, model, y0)?;
        Ok(cloud)
    }

    fn fill_initial(&self, cloud: &mut ParticleCloud, model: &dyn StateSpaceModel, y0: &DVector<f64>) -> Result<()> {
        for i in 0..cloud.len() {
            let x = &cloud.xi[i];
            let h = model.log_m(x, x, 0) + model.log_g(x, y0);
            if !h.is_finite() {
                return Err(Error::NonFiniteStatistic { particle: i, term: "H" });
            }
            cloud.h_stat[i] = h;
            if cloud.f_stat.nrows() > 0 {
                let mut col = cloud.f_stat.column_mut(i);
                model.accumulate_grad_log_m(x, x, 0, 1.0, col.as_mut_slice());
                model.accumulate_grad_log_g(x, y0, 1.0, col.as_mut_slice());
            }
        }
        Ok(())
    }

    /// Weights of every new particle against every previous one, from the
    /// potential form `log w[i][j] = <eta~(xi_t^i), T(xi_{t-1}^j)> - A(eta_{t-1} +
    /// eta~(xi_t^i)) + A(eta_{t-1})`.
    pub fn compute_weights(&self, prev: &ParticleCloud, params: &VarParams, xi_new: &[DVector<f64>]) -> Result<WeightMatrix> {
        let a_prev = prev.eta_t.log_normalizer()?;
        let n_prev = prev.len();
        let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = xi_new
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let pot = self.family.potential(params, x);
                let a_k = backward_kernel_from_flat(&prev.eta_t, pot.as_slice())?.log_normalizer()?;
                let lu: Vec<f64> = (0..n_prev).map(|j| column_dot(&prev.suff, j, pot.as_slice()) - a_k + a_prev).collect();
                let z = log_sum_exp(&lu);
                if !z.is_finite() {
                    return Err(Error::DegenerateRow { row: i });
                }
                let w = lu.iter().map(|v| (v - z).exp()).collect();
                Ok((lu, w))
            })
            .collect();
        let mut w = DMatrix::zeros(xi_new.len(), n_prev);
        let mut log_unnorm = DMatrix::zeros(xi_new.len(), n_prev);
        for (i, r) in rows.into_iter().enumerate() {
            let (lu, wr) = r?;
            for j in 0..n_prev {
                w[(i, j)] = wr[j];
                log_unnorm[(i, j)] = lu[j];
            }
        }
        Ok(WeightMatrix { w, log_unnorm })
    }

    fn row_setup(&self, prev: &ParticleCloud, ctx: &UpdateContext<'_, F::State>, x: &DVector<f64>, need_m: bool) -> Result<RowSetup> {
        let pot = self.family.potential(ctx.params, x);
        let kernel = backward_kernel_from_flat(&prev.eta_t, pot.as_slice())?;
        let a_kernel = kernel.log_normalizer()?;
        let m_kernel = if need_m {
            let e = kernel.expected_stats()?;
            let d = x.len();
            let mut m = DVector::zeros(flat_len(d));
            m.rows_mut(0, d).copy_from(&e.t1);
            m.rows_mut(d, d * d).copy_from_slice(e.t2.as_slice());
            Some(m)
        } else {
            None
        };
        Ok(RowSetup {
            pot,
            a_kernel,
            m_kernel,
            log_g: ctx.model.log_g(x, ctx.y),
        })
    }

    /// Full-weight update of the statistics of `new` from `prev`.
    pub fn update_statistics(&self, prev: &ParticleCloud, new: &mut ParticleCloud, ctx: &UpdateContext<'_, F::State>) -> Result<UpdateDiagnostics> {
        self.update(prev, new, ctx, None)
    }

    /// Backward-sampling update with `m` indices per new particle.
    pub fn backward_sample_update(
        &self,
        prev: &ParticleCloud,
        new: &mut ParticleCloud,
        ctx: &UpdateContext<'_, F::State>,
        m: usize,
        sampler: Sampler,
        rng: &mut dyn RngCore,
    ) -> Result<UpdateDiagnostics> {
        if m == 0 {
            return Err(Error::Config("at least one backward index is required".into()));
        }
        if matches!(sampler, Sampler::AcceptReject(ArBound::Clip)) && self.config.clip.is_none() {
            return Err(Error::MissingBound);
        }
        let seeds: Vec<u64> = (0..new.len()).map(|_| rng.next_u64()).collect();
        self.update(prev, new, ctx, Some((m, sampler, seeds)))
    }

    fn update(
        &self,
        prev: &ParticleCloud,
        new: &mut ParticleCloud,
        ctx: &UpdateContext<'_, F::State>,
        sampling: Option<(usize, Sampler, Vec<u64>)>,
    ) -> Result<UpdateDiagnostics> {
        let t = new.t;
        let n_new = new.len();
        let n_prev = prev.len();
        let d = self.family.dim_x();
        let k = flat_len(d);
        let p = new.g_stat.nrows();
        let th = new.f_stat.nrows();
        let shares = self.family.shares_params_through_time();
        let propagate_g = p > 0 && shares && prev.g_stat.nrows() == p;
        let a_prev = prev.eta_t.log_normalizer()?;
        let var = ctx.model.transition_var();
        let means: Vec<DVector<f64>> = prev.xi.par_iter().map(|x| ctx.model.transition_mean(x)).collect();
        let flat_xi: Vec<f64> = prev.xi.iter().flat_map(|x| x.iter().copied()).collect();
        let flat_means: Vec<f64> = means.iter().flat_map(|m| m.iter().copied()).collect();
        let inv_var: Vec<f64> = var.iter().map(|v| 1.0 / v).collect();
        // log m_t(xi_{t-1}^j, x) = log_m_const - 1/2 sum_k (x_k - mean_jk)^2 / var_k
        let log_m_const = diag_gaussian_log_pdf(&vec![0.0; d], &vec![0.0; d], var.as_slice());
        let log_m = |j: usize, x: &DVector<f64>| {
            let mean = means[j].as_slice();
            let q: f64 = x.as_slice().iter().zip(mean).zip(&inv_var).map(|((a, b), iv)| (a - b) * (a - b) * iv).sum();
            log_m_const - 0.5 * q
        };

        let log_q_prev = prev.log_q_marginal.as_slice();
        let h_prev = prev.h_stat.as_slice();
        // h~ of one (i, j) term; `lw` is the log-weight when already known
        let htilde = |setup: &RowSetup, j: usize, x: &DVector<f64>, lw: Option<f64>| -> f64 {
            let lw = lw.unwrap_or_else(|| column_dot(&prev.suff, j, setup.pot.as_slice()) - setup.a_kernel + a_prev);
            log_m(j, x) + setup.log_g - log_q_prev[j] - lw
        };

        let finish_row = |i: usize, setup: &RowSetup, x: &DVector<f64>, js: Option<&[usize]>, ws: &[f64], hv: &[f64], draws: Option<usize>| -> Result<RowResult> {
            // term n pairs previous index js[n] (n itself when `js` is None)
            // with weight ws[n] and H-summand hv[n]; `draws` is M for the
            // sampled update
            let jof = |n: usize| js.map_or(n, |js| js[n]);
            let h: f64 = ws.iter().zip(hv).map(|(w, b)| w * b).sum();
            if !h.is_finite() {
                return Err(Error::NonFiniteStatistic { particle: i, term: "H" });
            }
            // Centring on H computed from the same M draws shrinks the score
            // term by (M - 1) / M; the leave-one-out form rescales it back.
            let (centre, scale) = match draws {
                _ if !self.config.cv_g => (0.0, 1.0),
                None => (h, 1.0),
                Some(1) => (0.0, 1.0),
                Some(m) => (h, m as f64 / (m as f64 - 1.0)),
            };
            let mut smooth = DVector::zeros(d);
            {
                let sm = smooth.as_mut_slice();
                let mut add = |w: f64, xi: &[f64]| {
                    for (a, b) in sm.iter_mut().zip(xi) {
                        *a += w * b;
                    }
                };
                match js {
                    None => ws.iter().zip(flat_xi.chunks_exact(d)).for_each(|(&w, xi)| add(w, xi)),
                    Some(js) => ws.iter().zip(js).for_each(|(&w, &j)| add(w, &flat_xi[j * d..(j + 1) * d])),
                }
            }
            let c = match &setup.m_kernel {
                Some(mk) => {
                    let mut c = DVector::zeros(k);
                    let mut total = 0.0;
                    let cs = c.as_mut_slice();
                    let suff = prev.suff.as_slice();
                    for (n, (&w, b)) in ws.iter().zip(hv).enumerate() {
                        let j = jof(n);
                        let s = scale * w * (b - centre);
                        total += s;
                        for (cr, v) in cs.iter_mut().zip(&suff[j * k..(j + 1) * k]) {
                            *cr += s * v;
                        }
                    }
                    c.axpy(-total, mk, 1.0);
                    if c.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteStatistic { particle: i, term: "G" });
                    }
                    Some(c)
                }
                None => None,
            };
            let f = if th > 0 {
                let mut f = DVector::zeros(th);
                for (n, &w) in ws.iter().enumerate() {
                    ctx.model.accumulate_grad_log_m(&prev.xi[jof(n)], x, t, w, f.as_mut_slice());
                }
                ctx.model.accumulate_grad_log_g(x, ctx.y, 1.0, f.as_mut_slice());
                Some(f)
            } else {
                None
            };
            Ok(RowResult {
                h,
                c,
                smooth,
                f,
                w: None,
                g: None,
                proposals: 0,
                fallback: false,
            })
        };

        let need_m = p > 0;
        let mut h_new = DVector::zeros(n_new);
        let mut c_mat = DMatrix::zeros(if need_m { k } else { 0 }, n_new);
        let mut g_new = DMatrix::zeros(p, n_new);
        let mut f_new = DMatrix::zeros(th, n_new);
        let mut smooth_sum = DVector::zeros(d);
        let mut diag = UpdateDiagnostics::default();

        match sampling {
            None => {
                let need_w = propagate_g || th > 0;
                let block = if need_w { (BLOCK_ELEMS / n_prev.max(1)).clamp(1, n_new) } else { n_new };
                let mut start = 0;
                while start < n_new {
                    let end = (start + block).min(n_new);
                    let rows: Vec<Result<RowResult>> = (start..end)
                        .into_par_iter()
                        .map(|i| {
                            let x = &new.xi[i];
                            let setup = self.row_setup(prev, ctx, x, need_m)?;
                            // log-weights and H-summands in one contiguous pass
                            let pot = setup.pot.as_slice();
                            let xs = x.as_slice();
                            let shift = a_prev - setup.a_kernel;
                            let base = setup.log_g + log_m_const;
                            let mut w = vec![0.0; n_prev];
                            let mut hv = vec![0.0; n_prev];
                            let row = RowInputs {
                                suff: prev.suff.as_slice(),
                                means: &flat_means,
                                h_prev,
                                log_q_prev,
                                pot,
                                x: xs,
                                inv_var: &inv_var,
                                shift,
                                base,
                            };
                            let top = match d {
                                1 => row.fill::<2, 1>(&mut w, &mut hv),
                                2 => row.fill::<6, 2>(&mut w, &mut hv),
                                3 => row.fill::<12, 3>(&mut w, &mut hv),
                                _ => row.fill_dyn(k, d, &mut w, &mut hv),
                            };
                            if !softmax_in_place(&mut w, top) {
                                return Err(Error::DegenerateRow { row: i });
                            }
                            let mut r = finish_row(i, &setup, x, None, &w, &hv, None)?;
                            if need_w {
                                r.w = Some(DVector::from_vec(w));
                            }
                            Ok(r)
                        })
                        .collect();
                    let mut wblock = DMatrix::zeros(if need_w { n_prev } else { 0 }, end - start);
                    for (off, r) in rows.into_iter().enumerate() {
                        let r = r?;
                        let i = start + off;
                        h_new[i] = r.h;
                        smooth_sum += &r.smooth;
                        if let Some(c) = r.c {
                            c_mat.set_column(i, &c);
                        }
                        if let Some(f) = r.f {
                            f_new.set_column(i, &f);
                        }
                        if let Some(w) = r.w {
                            wblock.set_column(off, &w);
                        }
                    }
                    // weighted sums of previous G and F columns as products
                    if propagate_g {
                        let mut gv = g_new.columns_mut(start, end - start);
                        gv.gemm(1.0, &prev.g_stat, &wblock, 0.0);
                    }
                    if th > 0 {
                        let mut fv = f_new.columns_mut(start, end - start);
                        fv.gemm(1.0, &prev.f_stat, &wblock, 1.0);
                    }
                    start = end;
                }
            }
            Some((m, sampler, seeds)) => {
                let rows: Vec<Result<RowResult>> = (0..n_new)
                    .into_par_iter()
                    .map(|i| {
                        let x = &new.xi[i];
                        let setup = self.row_setup(prev, ctx, x, need_m)?;
                        let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                        let (picks, proposals, fallback) = self.sample_indices(prev, &setup, a_prev, m, sampler, &mut rng, i)?;
                        let w = 1.0 / m as f64;
                        let ws = vec![w; m];
                        let hv: Vec<f64> = picks.iter().map(|&j| h_prev[j] + htilde(&setup, j, x, None)).collect();
                        let mut r = finish_row(i, &setup, x, Some(&picks), &ws, &hv, Some(m))?;
                        if propagate_g {
                            let mut g = DVector::zeros(p);
                            for &j in &picks {
                                g.axpy(w, &prev.g_stat.column(j), 1.0);
                            }
                            r.g = Some(g);
                        }
                        if let Some(f) = r.f.as_mut() {
                            for &j in &picks {
                                f.axpy(w, &prev.f_stat.column(j), 1.0);
                            }
                        }
                        r.proposals = proposals;
                        r.fallback = fallback;
                        Ok(r)
                    })
                    .collect();
                for (i, r) in rows.into_iter().enumerate() {
                    let r = r?;
                    h_new[i] = r.h;
                    smooth_sum += &r.smooth;
                    if let Some(c) = r.c {
                        c_mat.set_column(i, &c);
                    }
                    if let Some(f) = r.f {
                        f_new.set_column(i, &f);
                    }
                    if let Some(g) = r.g {
                        g_new.set_column(i, &g);
                    }
                    diag.proposals += r.proposals;
                    diag.fallbacks += r.fallback as u64;
                }
            }
        }

        if p > 0 {
            if shares {
                let jt = self.family.marginal_jacobian_t(ctx.params, ctx.prev_state);
                g_new.gemm(1.0, &jt, &c_mat, 1.0);
            }
            g_new
                .as_mut_slice()
                .par_chunks_mut(p)
                .enumerate()
                .for_each(|(i, col)| {
                    let c = c_mat.column(i).into_owned();
                    self.family.potential_vjp(ctx.params, &new.xi[i], &c, col);
                });
            if let Some(i) = (0..n_new).find(|&i| g_new.column(i).iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteStatistic { particle: i, term: "G" });
            }
        }
        if let Some(i) = (0..n_new).find(|&i| f_new.column(i).iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteStatistic { particle: i, term: "F" });
        }
        new.h_stat = h_new;
        new.g_stat = g_new;
        new.f_stat = f_new;
        diag.smooth_prev_mean = smooth_sum / n_new as f64;
        Ok(diag)
    }

    /// Draws `m` backward indices for one row; returns them with the number of
    /// accept-reject proposals and whether the categorical fallback was used.
    #[allow(clippy::too_many_arguments)]
    fn sample_indices(
        &self,
        prev: &ParticleCloud,
        setup: &RowSetup,
        a_prev: f64,
        m: usize,
        sampler: Sampler,
        rng: &mut ChaCha8Rng,
        row: usize,
    ) -> Result<(Vec<usize>, u64, bool)> {
        let n_prev = prev.len();
        let mut picks = Vec::with_capacity(m);
        let mut proposals = 0u64;
        let bound = match sampler {
            Sampler::Categorical => None,
            Sampler::AcceptReject(ArBound::Clip) => Some(self.config.clip.ok_or(Error::MissingBound)?.log_eps_plus),
            Sampler::AcceptReject(ArBound::Analytic) => potential_sup(setup.pot.as_slice(), self.family.dim_x()),
            Sampler::AcceptReject(ArBound::Fixed(b)) => Some(b),
        };
        let is_ar = matches!(sampler, Sampler::AcceptReject(_));
        if let Some(b) = bound {
            // each index gets at most 100 N proposals
            let cap = 100 * n_prev as u64;
            'draws: while picks.len() < m {
                let mut tries = 0;
                loop {
                    if tries == cap {
                        break 'draws;
                    }
                    tries += 1;
                    proposals += 1;
                    let j = rng.random_range(0..n_prev);
                    let mut lp = column_dot(&prev.suff, j, setup.pot.as_slice());
                    if let (Sampler::AcceptReject(ArBound::Clip), Some(c)) = (sampler, &self.config.clip) {
                        lp = c.apply(lp);
                    }
                    if rng.random::<f64>() < (lp - b).exp() {
                        picks.push(j);
                        break;
                    }
                }
            }
        }
        let fallback = is_ar && picks.len() < m;
        if picks.len() < m {
            let lu: Vec<f64> = (0..n_prev).map(|j| column_dot(&prev.suff, j, setup.pot.as_slice()) - setup.a_kernel + a_prev).collect();
            let z = log_sum_exp(&lu);
            if !z.is_finite() {
                return Err(Error::DegenerateRow { row });
            }
            let w: Vec<f64> = lu.iter().map(|v| (v - z).exp()).collect();
            while picks.len() < m {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = n_prev - 1;
                for (j, wj) in w.iter().enumerate() {
                    acc += wj;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                picks.push(pick);
            }
        }
        Ok((picks, proposals, fallback))
    }

    /// ELBO and gradient estimates from a populated cloud. `state` is the family
    /// state that produced the cloud's marginal.
    pub fn estimate(&self, cloud: &ParticleCloud, params: &VarParams, state: &F::State) -> Result<EstimatorOutput> {
        let n = cloud.len() as f64;
        let terms = &cloud.h_stat - &cloud.log_q_marginal;
        let elbo = terms.mean();
        let var = if cloud.len() > 1 {
            terms.iter().map(|v| (v - elbo).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let grad_theta = if cloud.f_stat.nrows() > 0 {
            cloud.f_stat.column_mean()
        } else {
            DVector::zeros(0)
        };
        let p = cloud.g_stat.nrows();
        let grad_phi = if p > 0 {
            let e = cloud.eta_t.expected_stats()?;
            let mut score_w = cloud.h_stat.clone();
            if self.config.cv_estimate {
                let mean = score_w.mean();
                score_w.add_scalar_mut(-mean);
            }
            if self.config.entropy_score {
                // centring -log q by its exact mean keeps the estimator unbiased
                let centre = if self.config.cv_estimate { cloud.eta_t.inner(&e)? - cloud.eta_t.log_normalizer()? } else { 0.0 };
                score_w -= &cloud.log_q_marginal;
                score_w.add_scalar_mut(centre);
            }
            let d = cloud.eta_t.dim();
            let mut et = DVector::zeros(flat_len(d));
            et.rows_mut(0, d).copy_from(&e.t1);
            et.rows_mut(d, d * d).copy_from_slice(e.t2.as_slice());
            let mut cot = &cloud.suff * &score_w;
            cot.axpy(-score_w.sum(), &et, 1.0);
            cot /= n;
            let mut g = cloud.g_stat.column_mean();
            self.family.marginal_vjp(params, state, &cot, g.as_mut_slice());
            g
        } else {
            DVector::zeros(0)
        };
        Ok(EstimatorOutput {
            elbo,
            elbo_stderr: (var / n).sqrt(),
            grad_phi,
            grad_theta,
        })
    }

    /// One online step: fold `y` into the family state, draw the new cloud,
    /// update its statistics and estimate.
    pub fn step(
        &self,
        state: &mut EngineState<F::State>,
        y: &DVector<f64>,
        model: &dyn StateSpaceModel,
        params: &VarParams,
        particle_rng: &mut dyn RngCore,
        backward_rng: &mut dyn RngCore,
    ) -> Result<StepOutput> {
        let var = self.family.advance(params, &state.var, y)?;
        let eta = self.family.marginal(params, &var)?;
        eta.validate()?;
        let t = state.cloud.as_ref().map_or(0, |c| c.t + 1);
        let mut cloud = self.draw_cloud(t, eta, model, params, particle_rng)?;
        let mut diag = None;
        match &state.cloud {
            None => self.fill_initial(&mut cloud, model, y)?,
            Some(prev) => {
                let ctx = UpdateContext {
                    model,
                    params,
                    prev_state: &state.var,
                    y,
                };
                diag = Some(match self.config.method {
                    UpdateMethod::Full => self.update_statistics(prev, &mut cloud, &ctx)?,
                    UpdateMethod::Sampled { m, sampler } => self.backward_sample_update(prev, &mut cloud, &ctx, m, sampler, backward_rng)?,
                });
            }
        }
        let estimate = self.estimate(&cloud, params, &var)?;
        let out = StepOutput {
            t,
            estimate,
            filter_mean: cloud.mean(),
            smooth_prev_mean: diag.as_ref().map(|d| d.smooth_prev_mean.clone()),
            proposals: diag.as_ref().map_or(0, |d| d.proposals),
            fallbacks: diag.as_ref().map_or(0, |d| d.fallbacks),
        };
        state.var = var;
        state.cloud = Some(cloud);
        Ok(out)
    }
}

/// Row sums of a weight matrix, for checks.
pub fn row_sums(w: &WeightMatrix) -> Vec<f64> {
    (0..w.w.nrows()).map(|i| w.w.row(i).sum()).collect()
}

/// Kernel-ratio form of the weights: `log q_{t-1|t}(x_i, x_j) - log q_{t-1}(x_j)`
/// normalized per row, evaluated with full density calls.
pub fn kernel_ratio_weights<F: VariationalFamily>(family: &F, prev: &ParticleCloud, params: &VarParams, xi_new: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let mut w = DMatrix::zeros(xi_new.len(), prev.len());
    for (i, x) in xi_new.iter().enumerate() {
        let kernel = backward_kernel_from_flat(&prev.eta_t, family.potential(params, x).as_slice())?;
        let lu: Vec<f64> = prev
            .xi
            .iter()
            .map(|xp| Ok(kernel.log_density(xp)? - prev.eta_t.log_density(xp)?))
            .collect::<Result<_>>()?;
        let z = log_sum_exp(&lu);
        for j in 0..prev.len() {
            w[(i, j)] = (lu[j] - z).exp();
        }
    }
    Ok(w)
}
