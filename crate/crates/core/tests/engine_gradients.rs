//! The engine's ELBO and gradient estimates against a closed-form ELBO and its
//! finite-difference gradients.

mod common;

use common::{fd_gradient, mean_and_stderr, random_lgssm, AffineFamily};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamvi::engine::{Engine, EngineConfig, EstimatorOutput, Sampler, UpdateMethod};
use streamvi::models::StateSpaceModel;
use streamvi::oracle::exact_elbo;

fn run_estimates(cfg: EngineConfig, d: usize, reps: usize, seed: u64) -> (Vec<EstimatorOutput>, f64, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_lgssm(d, &mut rng);
    let traj = model.simulate(4, &mut rng);
    let fam = AffineFamily::new(d, d);
    let p = fam.random_params(&mut rng);
    let ys = traj.obs.clone();

    let elbo_phi = |phi: &DVector<f64>| {
        let mut q = p.clone();
        q.flat.copy_from(phi);
        exact_elbo(&model, &fam.chain(&q, &ys), &ys).unwrap()
    };
    let truth_phi = fd_gradient(elbo_phi, &p.flat, 1e-5);
    let elbo_theta = |th: &DVector<f64>| {
        let mut m = model.clone();
        m.set_params(th).unwrap();
        exact_elbo(&m, &fam.chain(&p, &ys), &ys).unwrap()
    };
    let truth_theta = fd_gradient(elbo_theta, &model.params().flat, 1e-5);
    let truth = exact_elbo(&model, &fam.chain(&p, &ys), &ys).unwrap();

    let engine = Engine::new(cfg, fam.clone());
    let outs = (0..reps)
        .map(|r| {
            let mut st = engine.initial_state();
            let mut a = ChaCha8Rng::seed_from_u64(1000 + r as u64);
            let mut b = ChaCha8Rng::seed_from_u64(5000 + r as u64);
            let mut last = None;
            for y in &ys {
                last = Some(engine.step(&mut st, y, &model, &p, &mut a, &mut b).unwrap().estimate);
            }
            last.unwrap()
        })
        .collect();
    (outs, truth, truth_phi, truth_theta)
}

fn check(cfg: EngineConfig, seed: u64) {
    check_in(cfg, 1, seed)
}

fn check_in(cfg: EngineConfig, d: usize, seed: u64) {
    let (outs, truth, truth_phi, truth_theta) = run_estimates(cfg, d, 60, seed);
    let elbos: Vec<_> = outs.iter().map(|o| DVector::from_element(1, o.elbo)).collect();
    let (me, se) = mean_and_stderr(&elbos);
    assert!((me[0] - truth).abs() < 4.0 * se[0] + 0.02, "elbo {} vs {truth} (se {})", me[0], se[0]);
    let gp: Vec<_> = outs.iter().map(|o| o.grad_phi.clone()).collect();
    let (mp, sp) = mean_and_stderr(&gp);
    for k in 0..mp.len() {
        let tol = 4.0 * sp[k] + 0.03 * truth_phi[k].abs() + 0.02;
        assert!((mp[k] - truth_phi[k]).abs() < tol, "phi[{k}]: {} vs {} (se {})", mp[k], truth_phi[k], sp[k]);
    }
    let gt: Vec<_> = outs.iter().map(|o| o.grad_theta.clone()).collect();
    let (mt, st) = mean_and_stderr(&gt);
    for k in 0..mt.len() {
        let tol = 4.0 * st[k] + 0.03 * truth_theta[k].abs() + 0.02;
        assert!((mt[k] - truth_theta[k]).abs() < tol, "theta[{k}]: {} vs {} (se {})", mt[k], truth_theta[k], st[k]);
    }
}

#[test]
fn full_update_gradients_match_closed_form() {
    for seed in 0..3 {
        check(EngineConfig::new(400), seed);
    }
}

#[test]
fn sampled_update_gradients_match_closed_form() {
    for seed in 0..3 {
        check(EngineConfig::new(400).sampled(2, Sampler::Categorical), seed);
    }
}

#[test]
fn gradients_without_control_variates_match_closed_form() {
    let mut cfg = EngineConfig::new(400);
    cfg.cv_g = false;
    cfg.cv_estimate = false;
    check(cfg, 7);
}

#[test]
fn accept_reject_sampling_matches_closed_form() {
    let mut cfg = EngineConfig::new(400);
    cfg.method = UpdateMethod::Sampled {
        m: 2,
        sampler: Sampler::AcceptReject(streamvi::engine::ArBound::Analytic),
    };
    check(cfg, 8);
}

#[test]
fn full_update_gradients_match_closed_form_in_higher_dimension() {
    check_in(EngineConfig::new(400), 2, 21);
    check_in(EngineConfig::new(400), 3, 22);
}
