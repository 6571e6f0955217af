//! End-to-end behaviour of the streaming harness.

use std::any::Any;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvi::engine::{Engine, EngineConfig};
use streamvi::harness::{evaluate, prepare, resume_stream, run_stream, ExperimentConfig, StreamRecord};
use streamvi::models::{LinearGaussianSsm, ModelParams, StateSpaceModel};
use streamvi::oracle::kalman_filter;
use streamvi::variational::{AmortizedConfig, AmortizedFamily};
use streamvi::Result;

fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(text).unwrap()
}

fn without_time(records: &[StreamRecord]) -> Vec<StreamRecord> {
    records.iter().cloned().map(|r| StreamRecord { step_time_ns: 0, ..r }).collect()
}

fn log_normal(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let chol = cov.clone().cholesky().unwrap();
    let r = y - mean;
    let quad = r.dot(&chol.solve(&r));
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (quad + log_det + y.len() as f64 * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn single_particle_elbo_matches_hand_evaluation() {
    // With the exact posterior as variational law, every path's log-ratio is
    // the evidence, so one particle must reproduce it exactly.
    let cfg = config(
        "model.kind = lgssm\nmodel.init = truth\nmodel.seed = 4\nrun.seed = 4\nrun.T = 1\nengine.n_particles = 1\n\
         variational.kind = exact\noptim.lr_phi = 0\noptim.lr_theta = 0\n",
    );
    let exp = prepare(cfg.clone()).unwrap();
    let m = exp.model.as_any().downcast_ref::<LinearGaussianSsm>().unwrap().clone();
    let ys = exp.stream.ys.clone();
    let out = run_stream(&cfg).unwrap();

    let s0 = m.g() * m.g().transpose() * m.q0_var + m.r_cov();
    let hand = log_normal(&ys[0], &DVector::zeros(ys[0].len()), &s0);
    assert!((out.records[0].elbo_over_t - hand).abs() < 1e-9, "{} vs {hand}", out.records[0].elbo_over_t);

    let evidence = kalman_filter(&m, &ys).unwrap().loglik();
    let last = out.records.last().unwrap();
    assert!((last.elbo_over_t * (last.t + 1) as f64 - evidence).abs() < 1e-9);
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "model.kind = lgssm\nrun.seed = 9\nmodel.seed = 9\nrun.T = 60\nengine.n_particles = 30\nrun.checkpoints = 25\nio.out_dir = {}\n",
        dir.path().display()
    );
    let cfg = config(&text);
    let full = run_stream(&cfg).unwrap();
    assert_eq!(full.checkpoints.len(), 1);
    let resumed = resume_stream(&cfg, &full.checkpoints[0]).unwrap();
    assert_eq!(without_time(&full.records), without_time(&resumed.records));
    assert_eq!(full.phi, resumed.phi);
    assert_eq!(full.theta, resumed.theta);
}

#[test]
fn resuming_under_another_configuration_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("run.T = 10\nengine.n_particles = 10\nrun.checkpoints = 4\nio.out_dir = {}\n", dir.path().display());
    let out = run_stream(&config(&text)).unwrap();
    let other = config(&format!("{text}run.seed = 1\n"));
    assert!(resume_stream(&other, &out.checkpoints[0]).is_err());
}

#[test]
fn lgssm_smoke_run_improves_the_elbo() {
    let (mut early, mut late) = (0.0, 0.0);
    for seed in 0..5 {
        let cfg = config(&format!(
            "model.kind = lgssm\nmodel.dx = 2\nmodel.dy = 2\nrun.seed = {seed}\nmodel.seed = {seed}\nrun.T = 2000\nengine.n_particles = 100\n"
        ));
        let out = run_stream(&cfg).unwrap();
        early += out.records[200].elbo_over_t / 5.0;
        late += out.records[2000].elbo_over_t / 5.0;
    }
    assert!(late > early, "elbo/t at 200: {early}, at 2000: {late}");
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let cfg = config("model.kind = lgssm\nrun.T = 40\nrun.test_len = 20\nengine.n_particles = 20\n");
    let out = run_stream(&cfg).unwrap();
    let exp = prepare(cfg.clone()).unwrap();
    let test = exp.test_stream.unwrap();
    let (phi, theta) = (out.phi.clone(), out.theta.clone());
    let a = evaluate(&out.phi, &out.theta.flat, &cfg, &test, exp.truth.as_ref()).unwrap();
    let b = evaluate(&out.phi, &out.theta.flat, &cfg, &test, exp.truth.as_ref()).unwrap();
    assert_eq!(a, b);
    assert_eq!(phi, out.phi);
    assert_eq!(theta, out.theta);
}

/// The LGSSM with its emission term deleted.
struct NoEmission(LinearGaussianSsm);

impl StateSpaceModel for NoEmission {
    fn dim_x(&self) -> usize {
        self.0.dim_x()
    }
    fn dim_y(&self) -> usize {
        self.0.dim_y()
    }
    fn params(&self) -> &ModelParams {
        self.0.params()
    }
    fn set_params(&mut self, flat: &DVector<f64>) -> Result<()> {
        self.0.set_params(flat)
    }
    fn log_initial(&self, x0: &DVector<f64>) -> f64 {
        self.0.log_initial(x0)
    }
    fn sample_initial(&self, rng: &mut dyn RngCore) -> DVector<f64> {
        self.0.sample_initial(rng)
    }
    fn transition_mean(&self, x_prev: &DVector<f64>) -> DVector<f64> {
        self.0.transition_mean(x_prev)
    }
    fn transition_var(&self) -> DVector<f64> {
        self.0.transition_var()
    }
    fn sample_emission(&self, x: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        self.0.sample_emission(x, rng)
    }
    fn log_g(&self, _: &DVector<f64>, _: &DVector<f64>) -> f64 {
        0.0
    }
    fn accumulate_grad_log_m(&self, x_prev: &DVector<f64>, x: &DVector<f64>, t: usize, weight: f64, out: &mut [f64]) {
        self.0.accumulate_grad_log_m(x_prev, x, t, weight, out)
    }
    fn accumulate_grad_log_g(&self, _: &DVector<f64>, _: &DVector<f64>, _: f64, _: &mut [f64]) {}
    fn as_any(&self) -> &dyn Any {
        self
    }
}

#[test]
fn fully_masked_step_equals_dropping_the_emission() {
    let m = LinearGaussianSsm::with_default_noise(DMatrix::from_element(1, 1, 0.7), DMatrix::from_element(1, 1, 1.3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ys = m.simulate(4, &mut rng).obs;
    let mut c = AmortizedConfig::new(1, 1);
    c.hidden = 6;
    c.marginal_hidden = vec![6];
    c.potential_hidden = vec![6];
    let fam = AmortizedFamily::new(c);
    let phi = fam.init_params(&mut rng);
    let engine = Engine::new(EngineConfig::new(40), fam);

    let masked = DVector::from_element(1, f64::NAN);
    let (mut prng, mut brng) = (ChaCha8Rng::seed_from_u64(5), ChaCha8Rng::seed_from_u64(6));
    let mut st = engine.initial_state();
    for y in &ys[..3] {
        engine.step(&mut st, y, &m, &phi, &mut prng, &mut brng).unwrap();
    }
    let (mut st2, mut prng2, mut brng2) = (st.clone(), prng.clone(), brng.clone());
    let a = engine.step(&mut st, &masked, &m, &phi, &mut prng, &mut brng).unwrap();
    let b = engine.step(&mut st2, &masked, &NoEmission(m.clone()), &phi, &mut prng2, &mut brng2).unwrap();
    assert!(a.estimate.grad_theta.norm() > 0.0);
    assert!((&a.estimate.grad_theta - &b.estimate.grad_theta).norm() <= 1e-12 * a.estimate.grad_theta.norm());
    assert_eq!(a.estimate.elbo, b.estimate.elbo);
}
