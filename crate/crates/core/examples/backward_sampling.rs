//! Compares the full O(N^2) statistics update with backward sampling
//! (categorical and accept-reject) on the same stream: ELBO estimate, its
//! standard error and the time per step.
//!
//! cargo run --release --example backward_sampling -- [N] [T]

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamvi::engine::{ArBound, Engine, EngineConfig, Sampler};
use streamvi::models::{LinearGaussianSsm, StateSpaceModel};
use streamvi::oracle::kalman_filter;
use streamvi::variational::ExactConjugateFamily;

fn main() -> streamvi::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let t_len: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let model = LinearGaussianSsm::with_default_noise(DMatrix::identity(2, 2) * 0.8, DMatrix::identity(2, 2))?;
    let traj = model.simulate(t_len, &mut ChaCha8Rng::seed_from_u64(0));
    println!("log-likelihood {:.4}", kalman_filter(&model, &traj.obs)?.loglik());

    let methods = [
        ("full", EngineConfig::new(n)),
        ("categorical", EngineConfig::new(n).sampled(2, Sampler::Categorical)),
        ("accept-reject", EngineConfig::new(n).sampled(2, Sampler::AcceptReject(ArBound::Analytic))),
    ];
    for (name, mut cfg) in methods {
        cfg.phi_grad = false;
        cfg.theta_grad = false;
        let engine = Engine::new(cfg, ExactConjugateFamily::new(&model)?);
        let params = ExactConjugateFamily::empty_params();
        let mut state = engine.initial_state();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut brng = ChaCha8Rng::seed_from_u64(2);
        let start = Instant::now();
        let mut last = None;
        let mut fallbacks = 0;
        for y in &traj.obs {
            let out = engine.step(&mut state, y, &model, &params, &mut rng, &mut brng)?;
            fallbacks += out.fallbacks;
            last = Some(out);
        }
        let per_step = start.elapsed().as_secs_f64() / traj.obs.len() as f64;
        let e = last.expect("non-empty stream").estimate;
        println!("{name:<14} ELBO {:.4} +- {:.4}  {:.2} ms/step  fallbacks {fallbacks}", e.elbo, e.elbo_stderr, 1e3 * per_step);
    }
    Ok(())
}
