//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything; numeric arguments
//! select criteria, e.g. `cargo test --test acceptance -- 4 8`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamvi::engine::{kernel_ratio_weights, row_sums, ArBound, Engine, EngineConfig, ParticleCloud, Sampler, UpdateContext};
use streamvi::expfam::{GaussianMoments, GaussianNatural};
use streamvi::gradients::grad_phi_log_marginal;
use streamvi::gradients::suite::fd_suite;
use streamvi::harness::{emit_report, kalman_pass, model_with_params, prepare, run_stream, ExperimentConfig, StreamRecord};
use streamvi::models::{LinearGaussianSsm, StateSpaceModel};
use streamvi::optim::{project_hook, OptState, Optimizer};
use streamvi::oracle::{exact_elbo, expected_h, kalman_filter};
use streamvi::variational::amortized::AmortizerWindow;
use streamvi::variational::conjugate::exact_conjugate_chain;
use streamvi::variational::{spectral_norm, AmortizedConfig, AmortizedFamily, ExactConjugateFamily, VariationalFamily};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn small_family(dx: usize, dy: usize, hidden: usize) -> AmortizedFamily {
    let mut c = AmortizedConfig::new(dx, dy);
    c.hidden = hidden;
    c.marginal_hidden = vec![hidden];
    c.potential_hidden = vec![hidden];
    AmortizedFamily::new(c)
}

fn uniform(rng: &mut ChaCha8Rng, d: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.random_range(-s..s))
}

fn random_natural(d: usize, rng: &mut ChaCha8Rng) -> GaussianNatural {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let cov = &a * a.transpose() + DMatrix::identity(d, d) * 0.5;
    GaussianNatural::from_moments(&GaussianMoments { mean: uniform(rng, d, 1.0), cov }).unwrap()
}

/// Linear-Gaussian model with transition spectral norm 0.8.
fn stable_lgssm(d: usize, rng: &mut ChaCha8Rng) -> LinearGaussianSsm {
    let f = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    let f = &f * (0.8 / spectral_norm(&f));
    let g = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    LinearGaussianSsm::with_default_noise(f, g).unwrap()
}

/// Least-squares slope of `log y` against `log x`.
fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gradient_correctness() -> Outcome {
    let out = fd_suite(60, 2024).unwrap();
    let detail = out
        .iter()
        .map(|o| format!("{} {}/{} max rel err {:.1e}", o.name, o.instances - o.failures, o.instances, o.max_rel_error))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(out.iter().all(|o| o.passed() && o.instances >= 50), detail)
}

fn score_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..10 {
        let f = small_family(2, 2, 4);
        let p = f.init_params(&mut rng);
        let window = AmortizerWindow {
            start: uniform(&mut rng, 4, 0.9),
            ys: (0..2).map(|_| uniform(&mut rng, 2, 1.5)).collect(),
        };
        let eta = f.marginal_from_window(&p, &window);
        let xs = eta.sample(&mut rng, draws).unwrap();
        let mut sum = DVector::zeros(p.len());
        let mut sq = DVector::zeros(p.len());
        for x in &xs {
            let g = grad_phi_log_marginal(&f, &p, &window, x).unwrap();
            sq += g.component_mul(&g);
            sum += g;
        }
        let n = draws as f64;
        for k in 0..p.len() {
            let mean = sum[k] / n;
            let se = ((sq[k] / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
            if se == 0.0 {
                failures += (mean != 0.0) as usize;
                continue;
            }
            let z = mean.abs() / se;
            worst = worst.max(z);
            failures += (z > 4.0) as usize;
        }
    }
    outcome(failures == 0, format!("10 instances x 1e5 draws, largest |mean|/stderr {worst:.2}"))
}

fn weight_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut max_row, mut max_diff): (f64, f64) = (0.0, 0.0);
    for inst in 0..100 {
        let d = 1 + inst % 3;
        let fam = small_family(d, d, 5);
        let p = fam.init_params(&mut rng);
        let engine = Engine::new(EngineConfig::new(40), fam);
        let m = stable_lgssm(d, &mut rng);
        let prev = engine.draw_cloud(0, random_natural(d, &mut rng), &m, &p, &mut rng).unwrap();
        let xi: Vec<_> = (0..25).map(|_| uniform(&mut rng, d, 2.0)).collect();
        let w = engine.compute_weights(&prev, &p, &xi).unwrap();
        let reference = kernel_ratio_weights(&engine.family, &prev, &p, &xi).unwrap();
        max_diff = max_diff.max((&w.w - &reference).amax());
        for s in row_sums(&w) {
            max_row = max_row.max((s - 1.0).abs());
        }
    }
    outcome(
        max_row <= 1e-12 && max_diff <= 1e-12,
        format!("100 instances, max |row sum - 1| {max_row:.1e}, max weight difference {max_diff:.1e}"),
    )
}

fn oracle_tightness() -> Outcome {
    let config = ExperimentConfig::parse(
        "model.kind = lgssm\nmodel.init = truth\nmodel.learn = false\nmodel.seed = 4\nrun.seed = 4\nrun.T = 500\n\
         variational.kind = exact\nengine.n_particles = 1000\n",
    )
    .unwrap();
    let exp = prepare(config.clone()).unwrap();
    let truth = model_with_params(&config, 2, &exp.truth.as_ref().unwrap().flat).unwrap();
    let oracle = kalman_pass(truth.as_ref(), &exp.stream).unwrap();
    let out = run_stream(&config).unwrap();
    let steps = exp.stream.len() as f64;
    let est = out.records.last().unwrap().elbo_over_t;
    let gap = (est - oracle.loglik / steps).abs();

    let lg = truth.as_any().downcast_ref::<LinearGaussianSsm>().unwrap();
    let filt = kalman_filter(lg, &exp.stream.ys).unwrap();
    let chain = exact_conjugate_chain(truth.as_ref(), &filt).unwrap();
    let closed = exact_elbo(truth.as_ref(), &chain, &exp.stream.ys).unwrap();
    let closed_gap = (closed - filt.loglik()).abs();
    outcome(
        gap < 0.05 && closed_gap < 1e-8,
        format!("|elbo/T - loglik/T| = {gap:.2e} (< 0.05), |closed-form ELBO - loglik| = {closed_gap:.1e} (< 1e-8)"),
    )
}

fn elbo_lower_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut brng = ChaCha8Rng::seed_from_u64(1005);
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for k in 0..20 {
        let d = 1 + k % 2;
        let m = stable_lgssm(d, &mut rng);
        let traj = m.simulate(100, &mut rng);
        let fam = small_family(d, d, 8);
        let p = fam.init_params(&mut rng);
        let mut cfg = EngineConfig::new(2000);
        cfg.phi_grad = false;
        cfg.theta_grad = false;
        let engine = Engine::new(cfg, fam);
        let mut st = engine.initial_state();
        let mut last = None;
        for y in &traj.obs {
            last = Some(engine.step(&mut st, y, &m, &p, &mut rng, &mut brng).unwrap());
        }
        let e = last.unwrap().estimate;
        let loglik = kalman_filter(&m, &traj.obs).unwrap().loglik();
        // standardized excess of the estimate over the log-likelihood
        let z = (e.elbo - loglik) / e.elbo_stderr.max(1e-300);
        worst = worst.max(z);
        failures += (e.elbo > loglik + 2.0 * e.elbo_stderr) as usize;
    }
    outcome(failures == 0, format!("20 pairs, largest (elbo - loglik)/stderr {worst:.2} (must be <= 2)"))
}

fn backward_sampling_unbiased() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut brng = ChaCha8Rng::seed_from_u64(1013);
    let n = 16;
    let m = stable_lgssm(2, &mut rng);
    let fam = small_family(2, 2, 5);
    let p = fam.init_params(&mut rng);
    let mut cfg = EngineConfig::new(n);
    cfg.phi_grad = false;
    let engine = Engine::new(cfg, fam);
    let mut st = engine.initial_state();
    let traj = m.simulate(3, &mut rng);
    for y in &traj.obs[..3] {
        engine.step(&mut st, y, &m, &p, &mut rng, &mut brng).unwrap();
    }
    let y = &traj.obs[3];
    let var = VariationalFamily::advance(&engine.family, &p, &st.var, y).unwrap();
    let eta = engine.family.marginal(&p, &var).unwrap();
    let prev = st.cloud.as_ref().unwrap();
    let new = engine.draw_cloud(prev.t + 1, eta, &m, &p, &mut rng).unwrap();
    let ctx = UpdateContext {
        model: &m,
        params: &p,
        prev_state: &st.var,
        y,
    };
    let mut full = new.clone();
    engine.update_statistics(prev, &mut full, &ctx).unwrap();
    let reps = 10_000;
    let mut sum = DVector::zeros(n);
    let mut sq = DVector::zeros(n);
    for _ in 0..reps {
        let mut c = new.clone();
        engine.backward_sample_update(prev, &mut c, &ctx, 2, Sampler::Categorical, &mut rng).unwrap();
        sum += &c.h_stat;
        sq += c.h_stat.component_mul(&c.h_stat);
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mean = sum[i] / reps as f64;
        let sd = (sq[i] / reps as f64 - mean * mean).max(0.0).sqrt();
        let se = sd / (reps as f64).sqrt();
        worst = worst.max((mean - full.h_stat[i]).abs() / se.max(1e-300));
    }
    outcome(worst <= 3.0, format!("N=16, M=2, 1e4 draws, largest |mean - full|/stderr {worst:.2}"))
}

fn control_variate_neutrality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut brng = ChaCha8Rng::seed_from_u64(1017);
    let m = stable_lgssm(2, &mut rng);
    let fam = small_family(2, 2, 5);
    let p = fam.init_params(&mut rng);
    let n = 64;
    let cfg_on = EngineConfig::new(n);
    let mut cfg_off = cfg_on;
    cfg_off.cv_estimate = false;
    let engine = Engine::new(cfg_on, fam.clone());
    let engine_off = Engine::new(cfg_off, fam);
    let mut st = engine.initial_state();
    for y in &m.simulate(4, &mut rng).obs {
        engine.step(&mut st, y, &m, &p, &mut rng, &mut brng).unwrap();
    }
    let base = st.cloud.clone().unwrap();
    let reps = 1000;
    let mut on = Vec::with_capacity(reps);
    let mut off = Vec::with_capacity(reps);
    for _ in 0..reps {
        let xi = base.eta_t.sample(&mut rng, n).unwrap();
        let mut c = ParticleCloud::from_particles(base.t, base.eta_t.clone(), xi, base.g_stat.nrows(), base.f_stat.nrows()).unwrap();
        c.h_stat = base.h_stat.clone();
        c.g_stat = base.g_stat.clone();
        c.f_stat = base.f_stat.clone();
        on.push(engine.estimate(&c, &p, &st.var).unwrap().grad_phi);
        off.push(engine_off.estimate(&c, &p, &st.var).unwrap().grad_phi);
    }
    let (m_on, se_on) = common::mean_and_stderr(&on);
    let (m_off, se_off) = common::mean_and_stderr(&off);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for k in 0..m_on.len() {
        let se = (se_on[k].powi(2) + se_off[k].powi(2)).sqrt();
        let diff = (m_on[k] - m_off[k]).abs();
        if se > 0.0 {
            worst = worst.max(diff / se);
        }
        failures += (diff >= 4.0 * se && diff > 0.0) as usize;
    }
    let var_on: f64 = se_on.iter().map(|v| v * v).sum();
    let var_off: f64 = se_off.iter().map(|v| v * v).sum();
    outcome(
        failures == 0,
        format!("1e3 clouds, largest |diff|/combined stderr {worst:.2}; total variance on/off {:.3}", var_on / var_off),
    )
}

fn monte_carlo_rate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut brng = ChaCha8Rng::seed_from_u64(1021);
    let m = stable_lgssm(2, &mut rng);
    let ys = m.simulate(4, &mut rng).obs;
    let filt = kalman_filter(&m, &ys).unwrap();
    let chain = exact_conjugate_chain(&m, &filt).unwrap();
    let target = expected_h(&m, &chain, &ys).unwrap();
    let sizes = [100usize, 1000, 10_000];
    let reps = [200usize, 40, 12];
    let mut rms = Vec::new();
    for (&n, &r) in sizes.iter().zip(&reps) {
        let mut cfg = EngineConfig::new(n);
        cfg.phi_grad = false;
        cfg.theta_grad = false;
        let engine = Engine::new(cfg, ExactConjugateFamily::new(&m).unwrap());
        let p = ExactConjugateFamily::empty_params();
        let mut sq = 0.0;
        for _ in 0..r {
            let mut st = engine.initial_state();
            for y in &ys {
                engine.step(&mut st, y, &m, &p, &mut rng, &mut brng).unwrap();
            }
            let err = st.cloud.as_ref().unwrap().h_stat.mean() - target;
            sq += err * err;
        }
        rms.push((sq / r as f64).sqrt());
    }
    let slope = log_log_slope(&sizes.map(|v| v as f64), &rms);
    outcome(
        (slope + 0.5).abs() <= 0.15,
        format!("RMS error {:.2e} / {:.2e} / {:.2e} at N = 1e2 / 1e3 / 1e4, slope {slope:.3}", rms[0], rms[1], rms[2]),
    )
}

fn parameter_learning() -> Outcome {
    let mut f_final = Vec::new();
    let mut g_final = Vec::new();
    let mut f_ratio = Vec::new();
    let mut g_ratio = Vec::new();
    for seed in 0..5 {
        let config = ExperimentConfig::parse(&format!(
            "model.kind = lgssm\nmodel.dx = 2\nmodel.dy = 2\nmodel.seed = {seed}\nrun.seed = {seed}\nrun.T = 20000\nengine.n_particles = 100\n\
             optim.lr_phi = 1e-3\noptim.lr_theta = 1e-4\n"
        ))
        .unwrap();
        let out = run_stream(&config).unwrap();
        let mae = |r: &StreamRecord, name: &str| r.param_mae.iter().find(|(n, _)| n == name).unwrap().1;
        let first = out.records.first().unwrap();
        let last = out.records.last().unwrap();
        f_final.push(mae(last, "F"));
        g_final.push(mae(last, "G"));
        f_ratio.push(mae(last, "F") / mae(first, "F"));
        g_ratio.push(mae(last, "G") / mae(first, "G"));
    }
    let (mf, mg, rf, rg) = (median(&mut f_final), median(&mut g_final), median(&mut f_ratio), median(&mut g_ratio));
    outcome(
        mf < 0.15 && mg < 0.15 && rf < 0.4 && rg < 0.4,
        format!("median MAE F {mf:.3} ({:.0}% of start), G {mg:.3} ({:.0}% of start)", 100.0 * rf, 100.0 * rg),
    )
}

fn chaotic_filtering() -> Outcome {
    let config = ExperimentConfig::parse(
        "model.kind = chaotic\nmodel.dx = 5\nmodel.dy = 5\nmodel.init = truth\nmodel.learn = false\nrun.T = 2000\n\
         engine.n_particles = 500\nvariational.kind = amortized\n",
    )
    .unwrap();
    let out = run_stream(&config).unwrap();
    let k2 = out.summary.kappa2.unwrap();
    let k1 = out.summary.kappa1.unwrap();
    outcome(
        k2 <= 0.20,
        format!("filtering RMSE {k2:.4} (<= 0.20; full-scale reference 0.103), 1-step smoothing RMSE {k1:.4} (reference 0.089)"),
    )
}

fn complexity_scaling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let mut brng = ChaCha8Rng::seed_from_u64(1029);
    let m = stable_lgssm(2, &mut rng);
    let ys = m.simulate(8, &mut rng).obs;
    let sizes = [100usize, 400, 1600];
    let time_per_step = |cfg: EngineConfig, rng: &mut ChaCha8Rng, brng: &mut ChaCha8Rng| -> f64 {
        let engine = Engine::new(cfg, ExactConjugateFamily::new(&m).unwrap());
        let p = ExactConjugateFamily::empty_params();
        let mut st = engine.initial_state();
        let mut times = Vec::new();
        for y in &ys {
            let start = Instant::now();
            engine.step(&mut st, y, &m, &p, rng, brng).unwrap();
            times.push(start.elapsed().as_secs_f64());
        }
        // the first step has no backward update
        median(&mut times[1..])
    };
    let mut full = Vec::new();
    let mut sampled = Vec::new();
    for &n in &sizes {
        full.push(time_per_step(EngineConfig::new(n), &mut rng, &mut brng));
        sampled.push(time_per_step(EngineConfig::new(n).sampled(2, Sampler::AcceptReject(ArBound::Analytic)), &mut rng, &mut brng));
    }
    let xs = sizes.map(|v| v as f64);
    let (sf, ss) = (log_log_slope(&xs, &full), log_log_slope(&xs, &sampled));
    outcome(
        sf >= 1.6 && ss <= 1.3,
        format!(
            "full slope {sf:.2} (>= 1.6, {:.2e} s at N=1600), sampled slope {ss:.2} (<= 1.3, {:.2e} s at N=1600)",
            full[2], sampled[2]
        ),
    )
}

fn spectral_projection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let fam = small_family(3, 3, 8);
    let mut p = fam.init_params(&mut rng);
    let opt = Optimizer::adam(0.5);
    let mut st = OptState::default();
    let rho = 0.9;
    let mut worst = f64::NEG_INFINITY;
    let mut idempotent = true;
    for _ in 0..1000 {
        let g = DVector::from_fn(p.len(), |_, _| rng.random_range(-50.0..50.0));
        opt.step(&mut p.flat, &g, &mut st).unwrap();
        project_hook(&mut p, rho);
        worst = worst.max(spectral_norm(&p.matrix("W")) - rho);
        let before = p.clone();
        idempotent &= !project_hook(&mut p, rho) && p == before;
    }
    outcome(
        worst <= 1e-10 && idempotent,
        format!("1e3 steps, max (||W||_2 - rho_max) {worst:.1e}, idempotent: {idempotent}"),
    )
}

fn metrics_without_timing(records: &[StreamRecord]) -> Vec<u8> {
    let f = tempfile::NamedTempFile::new().unwrap();
    emit_report(records, f.path()).unwrap();
    let text = std::fs::read_to_string(f.path()).unwrap();
    text.lines()
        .map(|l| {
            let mut cells: Vec<&str> = l.split(',').collect();
            cells.remove(4);
            cells.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
        .into_bytes()
}

fn determinism() -> Outcome {
    let config = ExperimentConfig::parse("model.kind = lgssm\nrun.seed = 77\nmodel.seed = 77\nrun.T = 2000\nengine.n_particles = 100\nengine.method = sampled\n").unwrap();
    let a = metrics_without_timing(&run_stream(&config).unwrap().records);
    let b = metrics_without_timing(&run_stream(&config).unwrap().records);
    outcome(a == b && !a.is_empty(), format!("two runs, {} bytes each, identical: {}", a.len(), a == b))
}

type Criterion = (usize, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 13] = [
    (1, "gradient correctness", gradient_correctness),
    (2, "score identity", score_identity),
    (3, "weight normalization", weight_normalization),
    (4, "oracle tightness", oracle_tightness),
    (5, "ELBO lower bound", elbo_lower_bound),
    (6, "backward-sampling unbiasedness", backward_sampling_unbiased),
    (7, "control-variate neutrality", control_variate_neutrality),
    (8, "Monte Carlo rate", monte_carlo_rate),
    (9, "parameter learning", parameter_learning),
    (10, "chaotic RNN filtering", chaotic_filtering),
    (11, "complexity scaling", complexity_scaling),
    (12, "spectral projection", spectral_projection),
    (13, "determinism", determinism),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        ran += 1;
        if !result.pass {
            failed.push(id.to_string());
        }
        println!(
            "criterion {id:>2} {} {name} ({:.1} s): {}",
            if result.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            result.detail
        );
    }
    if failed.is_empty() {
        println!("acceptance: {ran}/{ran} criteria pass");
    } else {
        println!("acceptance: {}/{ran} criteria pass; failing: {}", ran - failed.len(), failed.join(", "));
    }
    // report-only unless strict, so the other test targets still run
    if failed.is_empty() || std::env::var_os("ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
