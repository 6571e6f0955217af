//! The streaming learn/evaluate loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FamilyKind, ModelInit, ModelKind};
use super::data::{load_csv, ObservationStream};
use super::report::{EvalMetrics, StreamRecord, Summary};
use crate::engine::{Engine, EngineState, StepOutput};
use crate::error::{Error, Result};
use crate::oracle::{as_lgssm, exact_backward_kernel, kalman_filter};
use crate::models::{ChaoticRnn, LinearGaussianSsm, ModelParams, ResidualNonlinearSsm, StateSpaceModel};
use crate::optim::{project_hook, GradientMode, OptState, Optimizer};
use crate::rng::{child_rng, RngStreams};
use crate::variational::{spectral_norm, AmortizedConfig, AmortizedFamily, ExactConjugateFamily, NonAmortizedFamily, VarParams, VariationalFamily};

/// Everything a run starts from.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub stream: ObservationStream,
    pub test_stream: Option<ObservationStream>,
    /// Generative parameters, for synthetic streams.
    pub truth: Option<ModelParams>,
    /// The model being learned, at its initial parameters.
    pub model: Box<dyn StateSpaceModel>,
    pub rngs: RngStreams,
}

fn uniform_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// The model architecture of `config` with parameters drawn from `rng`.
fn draw_model(config: &ExperimentConfig, dy: usize, rng: &mut ChaCha8Rng) -> Result<Box<dyn StateSpaceModel>> {
    let m = &config.model;
    Ok(match m.kind {
        ModelKind::Lgssm => {
            let f = uniform_matrix(m.dx, m.dx, rng);
            let f = &f * (m.f_norm / spectral_norm(&f).max(1e-12));
            let g = uniform_matrix(dy, m.dx, rng);
            Box::new(LinearGaussianSsm::new(f, g, m.q_var, m.r_var, DVector::zeros(m.dx), 1.0)?)
        }
        ModelKind::Chaotic => {
            if dy != m.dx {
                return Err(Error::Config("the chaotic RNN observes every state coordinate: model.dy must equal model.dx".into()));
            }
            let seed: u64 = rng.random();
            Box::new(ChaoticRnn::benchmark(m.dx, seed))
        }
        ModelKind::Residual => {
            let seed: u64 = rng.random();
            Box::new(ResidualNonlinearSsm::new(m.dx, dy, &m.hidden, 1.0, m.q_var, seed))
        }
    })
}

/// Builds the model architecture with parameters `theta`.
pub fn model_with_params(config: &ExperimentConfig, dy: usize, theta: &DVector<f64>) -> Result<Box<dyn StateSpaceModel>> {
    let mut model = draw_model(config, dy, &mut child_rng(config.model.seed, "truth"))?;
    model.set_params(theta)?;
    Ok(model)
}

/// Generative model, data and initial model parameters for `config`.
pub fn prepare(config: ExperimentConfig) -> Result<Experiment> {
    let mut rngs = RngStreams::new(config.run.seed);
    let (truth_model, mut stream, test_stream) = match &config.io.data {
        Some(path) => {
            let stream = load_csv(path, config.io.sentinel, &config.io.columns, &config.io.state_columns)?;
            if stream.dim_y() != config.model.dy {
                return Err(Error::Config(format!("model.dy = {} but {} observation columns are selected", config.model.dy, stream.dim_y())));
            }
            (None, stream, None)
        }
        None => {
            let truth = draw_model(&config, config.model.dy, &mut child_rng(config.model.seed, "truth"))?;
            let stream = ObservationStream::from_trajectory(truth.simulate(config.run.t_len, &mut rngs.data));
            let test = (config.run.test_len > 0).then(|| ObservationStream::from_trajectory(truth.simulate(config.run.test_len, &mut rngs.test_data)));
            (Some(truth), stream, test)
        }
    };
    stream.mask_segments(config.run.mask_every, config.run.mask_len);
    if stream.len() > config.run.t_len + 1 {
        stream.ys.truncate(config.run.t_len + 1);
        if let Some(s) = stream.states.as_mut() {
            s.truncate(config.run.t_len + 1);
        }
    }
    let dy = config.model.dy;
    let truth = truth_model.as_ref().map(|m| m.params().clone());
    let model = match (config.model.init, &truth) {
        (ModelInit::Truth, Some(p)) => model_with_params(&config, dy, &p.flat)?,
        (ModelInit::Perturbed, Some(p)) => {
            let noise = DVector::from_fn(p.len(), |_, _| config.model.init_scale * rngs.init.sample::<f64, _>(StandardNormal));
            model_with_params(&config, dy, &(&p.flat + noise))?
        }
        _ => draw_model(&config, dy, &mut rngs.init)?,
    };
    Ok(Experiment {
        config,
        stream,
        test_stream,
        truth,
        model,
        rngs,
    })
}

/// Resumable state of a run after step `t`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: usize,
    pub config_text: String,
    pub phi: VarParams,
    pub theta: ModelParams,
    pub engine_state: serde_json::Value,
    pub opt_phi: OptState,
    pub opt_theta: OptState,
    pub rngs: RngStreams,
    pub records: Vec<StreamRecord>,
    pub projections: usize,
    pub ar_fallbacks: u64,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

pub struct RunOutput {
    pub phi: VarParams,
    pub theta: ModelParams,
    pub records: Vec<StreamRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub summary: Summary,
}

/// Families the harness can drive.
pub trait HarnessFamily: VariationalFamily + Sized {
    fn build(config: &ExperimentConfig, model: &dyn StateSpaceModel) -> Result<Self>;
    fn init_phi(&self, rng: &mut ChaCha8Rng) -> VarParams;
    /// Re-reads model parameters the family depends on.
    fn refresh(&mut self, _model: &dyn StateSpaceModel) -> Result<()> {
        Ok(())
    }
    /// Parameters are re-optimised at every step rather than shared.
    fn per_step(&self) -> bool {
        false
    }
}

impl HarnessFamily for AmortizedFamily {
    fn build(config: &ExperimentConfig, model: &dyn StateSpaceModel) -> Result<Self> {
        let v = &config.variational;
        let mut c = AmortizedConfig::new(model.dim_x(), model.dim_y());
        c.hidden = v.hidden;
        c.marginal_hidden = v.marginal_hidden.clone();
        c.potential_hidden = v.potential_hidden.clone();
        c.truncation_window = v.window;
        c.recurrent_init = v.recurrent_init;
        Ok(AmortizedFamily::new(c))
    }

    fn init_phi(&self, rng: &mut ChaCha8Rng) -> VarParams {
        self.init_params(rng)
    }
}

impl HarnessFamily for NonAmortizedFamily {
    fn build(config: &ExperimentConfig, model: &dyn StateSpaceModel) -> Result<Self> {
        Ok(NonAmortizedFamily::new(model.dim_x(), model.dim_y(), &config.variational.potential_hidden))
    }

    fn init_phi(&self, rng: &mut ChaCha8Rng) -> VarParams {
        self.init_params(rng)
    }

    fn per_step(&self) -> bool {
        true
    }
}

impl HarnessFamily for ExactConjugateFamily {
    fn build(_: &ExperimentConfig, model: &dyn StateSpaceModel) -> Result<Self> {
        ExactConjugateFamily::new(model)
    }

    fn init_phi(&self, _: &mut ChaCha8Rng) -> VarParams {
        ExactConjugateFamily::empty_params()
    }

    fn refresh(&mut self, model: &dyn StateSpaceModel) -> Result<()> {
        if self.model().params() != model.params() {
            *self = ExactConjugateFamily::new(model)?;
        }
        Ok(())
    }
}

fn rmse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

/// Entrywise mean absolute deviation per parameter block.
pub fn param_mae(learned: &ModelParams, truth: &ModelParams) -> Vec<(String, f64)> {
    learned
        .layout
        .slices()
        .iter()
        .map(|s| {
            let a = learned.slice(&s.name);
            let b = truth.slice(&s.name);
            let mae = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64;
            (s.name.clone(), mae)
        })
        .collect()
}

/// 1-step smoothing and filtering errors from per-step estimates over
/// `t = 0..T`: `filter[t]` estimates `x_t`, `smooth[t]` (for `t >= 1`)
/// estimates `x_{t-1}`. `kappa2` averages the filtering RMSE over `t = 1..T`,
/// `kappa1` the smoothing RMSE over `t = 1..T-1`.
pub fn kappa_metrics(filter: &[DVector<f64>], smooth: &[Option<DVector<f64>>], truth: &[DVector<f64>]) -> Result<(Option<f64>, Option<f64>)> {
    if truth.len() < filter.len() {
        return Err(Error::MissingTruth);
    }
    let big_t = filter.len().saturating_sub(1);
    let k2 = (big_t >= 1).then(|| (1..=big_t).map(|t| rmse(&filter[t], &truth[t])).sum::<f64>() / big_t as f64);
    let k1 = if big_t >= 2 {
        let mut s = 0.0;
        for t in 1..big_t {
            let est = smooth[t].as_ref().ok_or(Error::MissingTruth)?;
            s += rmse(est, &truth[t - 1]);
        }
        Some(s / (big_t - 1) as f64)
    } else {
        None
    };
    Ok((k1, k2))
}

struct Runner<F: HarnessFamily> {
    config: ExperimentConfig,
    engine: Engine<F>,
    model: Box<dyn StateSpaceModel>,
    phi: VarParams,
    state: EngineState<F::State>,
    opt_phi: OptState,
    opt_theta: OptState,
    rngs: RngStreams,
    records: Vec<StreamRecord>,
    projections: usize,
    ar_fallbacks: u64,
    learn_phi: bool,
    learn_theta: bool,
}

impl<F: HarnessFamily> Runner<F> {
    fn checkpoint(&self, t: usize) -> Result<Checkpoint> {
        self.checkpoint_with(t, &self.state, &self.phi, self.model.params())
    }

    fn checkpoint_with(&self, t: usize, state: &EngineState<F::State>, phi: &VarParams, theta: &ModelParams) -> Result<Checkpoint> {
        Ok(Checkpoint {
            t,
            config_text: self.config.to_text(),
            phi: phi.clone(),
            theta: theta.clone(),
            engine_state: serde_json::to_value(state)?,
            opt_phi: self.opt_phi.clone(),
            opt_theta: self.opt_theta.clone(),
            rngs: self.rngs.clone(),
            records: self.records.clone(),
            projections: self.projections,
            ar_fallbacks: self.ar_fallbacks,
        })
    }

    fn step(&mut self, y: &DVector<f64>) -> Result<StepOutput> {
        self.engine.family.refresh(self.model.as_ref())?;
        let out = if self.learn_phi && self.engine.family.per_step() {
            // inner optimisation of this step's parameters on a fixed past
            let inner = Optimizer {
                mode: GradientMode::Raw,
                ..self.config.optim.phi
            };
            let mut st = OptState::default();
            for _ in 0..self.config.variational.inner_steps {
                let mut trial = self.state.clone();
                let o = self.engine.step(&mut trial, y, self.model.as_ref(), &self.phi, &mut self.rngs.particles, &mut self.rngs.backward)?;
                inner.step(&mut self.phi.flat, &o.estimate.grad_phi, &mut st)?;
            }
            self.engine.step(&mut self.state, y, self.model.as_ref(), &self.phi, &mut self.rngs.particles, &mut self.rngs.backward)?
        } else {
            let o = self.engine.step(&mut self.state, y, self.model.as_ref(), &self.phi, &mut self.rngs.particles, &mut self.rngs.backward)?;
            if self.learn_phi {
                self.config.optim.phi.step(&mut self.phi.flat, &o.estimate.grad_phi, &mut self.opt_phi)?;
                if let Some(r) = self.config.optim.rho_max {
                    self.projections += project_hook(&mut self.phi, r) as usize;
                }
            }
            o
        };
        if self.learn_theta {
            let mut th = self.model.params().flat.clone();
            self.config.optim.theta.step(&mut th, &out.estimate.grad_theta, &mut self.opt_theta)?;
            self.model.set_params(&th)?;
        }
        if self.phi.flat.iter().chain(self.model.params().flat.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStatistic { particle: 0, term: "parameters" });
        }
        self.ar_fallbacks += out.fallbacks;
        Ok(out)
    }
}

/// Runs the configured experiment from the start.
pub fn run_stream(config: &ExperimentConfig) -> Result<RunOutput> {
    with_threads(config.run.threads, || run_prepared(prepare(config.clone())?, None))
}

/// Continues a run from a checkpoint written by an earlier run of the same
/// configuration.
pub fn resume_stream(config: &ExperimentConfig, checkpoint: &Path) -> Result<RunOutput> {
    let cp = Checkpoint::load(checkpoint)?;
    if ExperimentConfig::parse(&cp.config_text)? != *config {
        return Err(Error::Config("checkpoint was written under a different configuration".into()));
    }
    with_threads(config.run.threads, || run_prepared(prepare(config.clone())?, Some(cp)))
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

pub fn run_prepared(exp: Experiment, resume: Option<Checkpoint>) -> Result<RunOutput> {
    match exp.config.variational.kind {
        FamilyKind::Amortized => drive::<AmortizedFamily>(exp, resume),
        FamilyKind::NonAmortized => drive::<NonAmortizedFamily>(exp, resume),
        FamilyKind::Exact => drive::<ExactConjugateFamily>(exp, resume),
    }
}

fn drive<F: HarnessFamily>(exp: Experiment, resume: Option<Checkpoint>) -> Result<RunOutput> {
    let Experiment {
        config,
        stream,
        test_stream,
        truth,
        mut model,
        mut rngs,
    } = exp;
    let family = F::build(&config, model.as_ref())?;
    let mut phi = family.init_phi(&mut rngs.init);
    if let Some(r) = config.optim.rho_max {
        project_hook(&mut phi, r);
    }
    let learn_phi = config.variational.learn && !phi.is_empty() && !config.optim.phi.is_frozen();
    let learn_theta = config.model.learn && !config.optim.theta.is_frozen();
    let mut ecfg = config.engine;
    ecfg.phi_grad = learn_phi;
    ecfg.theta_grad = learn_theta;
    let engine = Engine::new(ecfg, family);
    let mut runner = Runner {
        state: engine.initial_state(),
        engine,
        model: Box::new(LinearGaussianSsm::with_default_noise(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1))?),
        phi,
        opt_phi: OptState::default(),
        opt_theta: OptState::default(),
        rngs,
        records: Vec::new(),
        projections: 0,
        ar_fallbacks: 0,
        learn_phi,
        learn_theta,
        config,
    };
    let mut t0 = 0;
    if let Some(cp) = resume {
        model.set_params(&cp.theta.flat)?;
        runner.phi = cp.phi;
        runner.state = serde_json::from_value(cp.engine_state)?;
        runner.opt_phi = cp.opt_phi;
        runner.opt_theta = cp.opt_theta;
        runner.rngs = cp.rngs;
        runner.records = cp.records;
        runner.projections = cp.projections;
        runner.ar_fallbacks = cp.ar_fallbacks;
        t0 = cp.t + 1;
    }
    runner.model = model;
    let out_dir = runner.config.io.out_dir.clone();
    let mut checkpoints = Vec::new();

    for t in t0..stream.len() {
        let started = Instant::now();
        // parameters and state before the step, for the abort dump
        let before = (runner.state.clone(), runner.phi.clone(), runner.model.params().clone());
        let out = match runner.step(&stream.ys[t]) {
            Ok(o) => o,
            Err(e) if e.exit_code() == 3 => {
                let dump = out_dir.join(format!("abort_t{t}.json"));
                let dump = runner
                    .checkpoint_with(t.wrapping_sub(1), &before.0, &before.1, &before.2)
                    .and_then(|cp| cp.save(&dump))
                    .ok()
                    .map(|_| dump);
                return Err(Error::NumericalAbort {
                    step: t,
                    dump,
                    source: Box::new(e),
                });
            }
            Err(e) => return Err(e),
        };
        let elapsed = started.elapsed().as_nanos() as u64;
        let (filt_rmse, smooth_rmse) = match &stream.states {
            Some(xs) => (
                Some(rmse(&out.filter_mean, &xs[t])),
                out.smooth_prev_mean.as_ref().map(|m| rmse(m, &xs[t - 1])),
            ),
            None => (None, None),
        };
        runner.records.push(StreamRecord {
            t,
            elbo_over_t: out.estimate.elbo / (t + 1) as f64,
            grad_phi_norm: out.estimate.grad_phi.norm(),
            grad_theta_norm: out.estimate.grad_theta.norm(),
            step_time_ns: elapsed,
            param_mae: truth.as_ref().map(|p| param_mae(runner.model.params(), p)).unwrap_or_default(),
            filt_rmse,
            smooth_rmse,
        });
        if runner.config.run.checkpoints.contains(&t) {
            let cp = runner.checkpoint(t)?;
            let path = out_dir.join(format!("checkpoint_t{t}.json"));
            cp.save(&path)?;
            cp.phi.save(&out_dir.join(format!("phi_t{t}")))?;
            cp.theta.save(&out_dir.join(format!("theta_t{t}")))?;
            checkpoints.push(path);
        }
    }

    let records = runner.records;
    let (kappa1, kappa2) = summarize_kappa(&records);
    let theta = runner.model.params().clone();
    let eval = match &test_stream {
        Some(ts) => Some(evaluate(&runner.phi, &theta.flat, &runner.config, ts, truth.as_ref())?),
        None => None,
    };
    let summary = Summary {
        seed: runner.config.run.seed,
        steps: records.len(),
        final_elbo_over_t: records.last().map(|r| r.elbo_over_t),
        kappa1,
        kappa2,
        param_mae: truth.as_ref().map(|p| param_mae(&theta, p)).unwrap_or_default(),
        clip_events: runner.opt_phi.clip_events + runner.opt_theta.clip_events,
        projections: runner.projections,
        ar_fallbacks: runner.ar_fallbacks,
        eval,
    };
    Ok(RunOutput {
        phi: runner.phi,
        theta,
        records,
        checkpoints,
        summary,
    })
}

/// `kappa1` and `kappa2` from the per-step RMSE columns of a record list.
pub fn summarize_kappa(records: &[StreamRecord]) -> (Option<f64>, Option<f64>) {
    let f: Vec<f64> = records.iter().filter(|r| r.t >= 1).filter_map(|r| r.filt_rmse).collect();
    let last = records.last().map_or(0, |r| r.t);
    let s: Vec<f64> = records.iter().filter(|r| r.t >= 1 && r.t < last).filter_map(|r| r.smooth_rmse).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    (mean(&s), mean(&f))
}

/// Runs the engine over `test` with frozen parameters and reports the
/// smoothing and filtering errors. Parameters are not modified.
pub fn evaluate(phi: &VarParams, theta: &DVector<f64>, config: &ExperimentConfig, test: &ObservationStream, truth: Option<&ModelParams>) -> Result<EvalMetrics> {
    let states = test.states.as_ref().ok_or(Error::MissingTruth)?;
    let model = model_with_params(config, test.dim_y(), theta)?;
    match config.variational.kind {
        FamilyKind::Amortized => evaluate_with::<AmortizedFamily>(phi, model, config, test, states, truth),
        FamilyKind::NonAmortized => evaluate_with::<NonAmortizedFamily>(phi, model, config, test, states, truth),
        FamilyKind::Exact => evaluate_with::<ExactConjugateFamily>(phi, model, config, test, states, truth),
    }
}

fn evaluate_with<F: HarnessFamily>(
    phi: &VarParams,
    model: Box<dyn StateSpaceModel>,
    config: &ExperimentConfig,
    test: &ObservationStream,
    states: &[DVector<f64>],
    truth: Option<&ModelParams>,
) -> Result<EvalMetrics> {
    let family = F::build(config, model.as_ref())?;
    let mut ecfg = config.engine;
    ecfg.phi_grad = false;
    ecfg.theta_grad = false;
    let engine = Engine::new(ecfg, family);
    let mut st = engine.initial_state();
    let mut prng = child_rng(config.run.seed, "eval-particles");
    let mut brng = child_rng(config.run.seed, "eval-backward");
    let mut filter = Vec::with_capacity(test.len());
    let mut smooth = Vec::with_capacity(test.len());
    let mut elbo = 0.0;
    for y in &test.ys {
        let out = engine.step(&mut st, y, model.as_ref(), phi, &mut prng, &mut brng)?;
        filter.push(out.filter_mean);
        smooth.push(out.smooth_prev_mean);
        elbo = out.estimate.elbo;
    }
    let (kappa1, kappa2) = kappa_metrics(&filter, &smooth, states)?;
    Ok(EvalMetrics {
        kappa1,
        kappa2,
        elbo_over_t: elbo / test.len() as f64,
        param_mae: truth.map(|p| param_mae(model.params(), p)).unwrap_or_default(),
    })
}

/// Exact filtering pass of a linear-Gaussian model over a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanReport {
    pub steps: usize,
    pub loglik: f64,
    pub loglik_over_t: f64,
    pub kappa1: Option<f64>,
    pub kappa2: Option<f64>,
}

/// Runs the Kalman filter of `model` over `stream`; the smoothing error uses
/// the exact lag-one estimate `E[X_{t-1} | y_{0:t}]`.
pub fn kalman_pass(model: &dyn StateSpaceModel, stream: &ObservationStream) -> Result<KalmanReport> {
    let lg = as_lgssm(model)?;
    let filt = kalman_filter(lg, &stream.ys)?;
    let (kappa1, kappa2) = match &stream.states {
        Some(xs) => {
            let mut smooth = vec![None];
            for t in 1..filt.len() {
                let k = exact_backward_kernel(lg, &filt, t)?;
                smooth.push(Some(&k.a * &filt.filt_mean[t] + &k.b));
            }
            kappa_metrics(&filt.filt_mean, &smooth, xs)?
        }
        None => (None, None),
    };
    Ok(KalmanReport {
        steps: filt.len(),
        loglik: filt.loglik(),
        loglik_over_t: filt.loglik() / filt.len() as f64,
        kappa1,
        kappa2,
    })
}
