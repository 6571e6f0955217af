//! Exact filtering and smoothing of a simulated linear-Gaussian model, and the
//! closed-form ELBO of the exact posterior chain, which equals the
//! log-likelihood.
//!
//! cargo run --release --example kalman_oracle -- [T]

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamvi::models::{LinearGaussianSsm, StateSpaceModel};
use streamvi::oracle::{exact_elbo, kalman_filter, kalman_smoother};
use streamvi::variational::conjugate::exact_conjugate_chain;

fn rmse(a: &[nalgebra::DVector<f64>], b: &[nalgebra::DVector<f64>]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    (s / (a.len() * a[0].len()) as f64).sqrt()
}

fn main() -> streamvi::Result<()> {
    let t_len: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let f = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, -0.1, 0.6]);
    let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
    let model = LinearGaussianSsm::with_default_noise(f, g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let traj = model.simulate(t_len, &mut rng);

    let filt = kalman_filter(&model, &traj.obs)?;
    let smooth = kalman_smoother(&model, &filt)?;
    println!("log-likelihood        {:.6}", filt.loglik());
    println!("filtering RMSE        {:.4}", rmse(&filt.filt_mean, &traj.states));
    println!("smoothing RMSE        {:.4}", rmse(&smooth.smooth_mean, &traj.states));

    let chain = exact_conjugate_chain(&model, &filt)?;
    let elbo = exact_elbo(&model, &chain, &traj.obs)?;
    println!("ELBO of exact chain   {elbo:.6} (gap {:.1e})", (elbo - filt.loglik()).abs());
    Ok(())
}
