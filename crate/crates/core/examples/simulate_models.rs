//! Simulates the three generative models and prints summary statistics of
//! their states and observations.
//!
//! cargo run --release --example simulate_models

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamvi::models::{ChaoticRnn, LinearGaussianSsm, ResidualNonlinearSsm, StateSpaceModel, Trajectory};

fn describe(name: &str, model: &dyn StateSpaceModel, traj: &Trajectory) {
    let spread = |v: &[nalgebra::DVector<f64>]| {
        let n = (v.len() * v[0].len()) as f64;
        (v.iter().map(|x| x.norm_squared()).sum::<f64>() / n).sqrt()
    };
    println!(
        "{name:<10} dx {} dy {} params {:>5}  rms state {:.3}  rms obs {:.3}",
        model.dim_x(),
        model.dim_y(),
        model.num_params(),
        spread(&traj.states),
        spread(&traj.obs)
    );
}

fn main() -> streamvi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lgssm = LinearGaussianSsm::with_default_noise(DMatrix::identity(3, 3) * 0.8, DMatrix::identity(3, 3))?;
    let chaotic = ChaoticRnn::benchmark(5, 7);
    let residual = ResidualNonlinearSsm::default_arch(2, 3, 7);
    for (name, m) in [("lgssm", &lgssm as &dyn StateSpaceModel), ("chaotic", &chaotic), ("residual", &residual)] {
        let traj = m.simulate(1000, &mut rng);
        describe(name, m, &traj);
    }
    Ok(())
}
