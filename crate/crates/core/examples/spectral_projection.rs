//! Adam steps on the amortizer parameters followed by the spectral projection
//! of the recurrent matrix, which keeps its spectral norm below `rho_max`.
//!
//! cargo run --release --example spectral_projection -- [rho_max]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamvi::optim::{project_hook, OptState, Optimizer};
use streamvi::variational::{spectral_norm, AmortizedConfig, AmortizedFamily};

fn main() -> streamvi::Result<()> {
    let rho_max: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.9);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let family = AmortizedFamily::new(AmortizedConfig::new(2, 2));
    let mut params = family.init_params(&mut rng);
    let opt = Optimizer::adam(0.05);
    let mut state = OptState::default();
    let mut projections = 0;
    for step in 0..50 {
        let grad = DVector::from_fn(params.flat.len(), |_, _| rng.random_range(-50.0..50.0));
        opt.step(&mut params.flat, &grad, &mut state)?;
        let before = spectral_norm(&params.matrix("W"));
        if project_hook(&mut params, rho_max) {
            projections += 1;
        }
        if step % 10 == 9 {
            println!("step {:>2}  |W| before {before:.4}  after {:.4}", step + 1, spectral_norm(&params.matrix("W")));
        }
    }
    println!("{projections} projections onto the ball of radius {rho_max}");
    Ok(())
}
