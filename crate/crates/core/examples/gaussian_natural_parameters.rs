//! Round trip between moment and natural parameters of a Gaussian, the log
//! partition function and a Monte Carlo check of the expected statistics.
//!
//! cargo run --release --example gaussian_natural_parameters

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamvi::expfam::{GaussianMoments, GaussianNatural};

fn main() -> streamvi::Result<()> {
    let moments = GaussianMoments {
        mean: DVector::from_vec(vec![1.0, -0.5]),
        cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]),
    };
    let eta = GaussianNatural::from_moments(&moments)?;
    println!("eta1 = {:?}", eta.eta1().as_slice());
    println!("eta2 = {:?}", eta.eta2().as_slice());
    println!("A(eta) = {:.6}", eta.log_normalizer()?);

    let back = eta.to_moments()?;
    println!("mean error {:.2e}, cov error {:.2e}", (&back.mean - &moments.mean).amax(), (&back.cov - &moments.cov).amax());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let xs = eta.sample(&mut rng, n)?;
    let mc_mean = xs.iter().fold(DVector::zeros(2), |acc, x| acc + x) / n as f64;
    println!("Monte Carlo mean {:?} (exact {:?})", mc_mean.as_slice(), eta.mean()?.as_slice());
    Ok(())
}
