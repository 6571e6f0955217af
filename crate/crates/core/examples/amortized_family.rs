//! Runs the recurrent amortizer over a short observation stream and prints the
//! variational marginal and a backward kernel at each step.
//!
//! cargo run --release --example amortized_family

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streamvi::models::{LinearGaussianSsm, StateSpaceModel};
use streamvi::variational::{AmortizedConfig, AmortizedFamily, VariationalFamily};

fn main() -> streamvi::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = LinearGaussianSsm::with_default_noise(DMatrix::identity(2, 2) * 0.9, DMatrix::identity(2, 2))?;
    let traj = model.simulate(5, &mut rng);

    let family = AmortizedFamily::new(AmortizedConfig::new(2, 2));
    let params = family.init_params(&mut rng);
    println!("{} variational parameters", family.num_params());

    let mut state = VariationalFamily::initial_state(&family);
    let mut prev_eta = None;
    for (t, y) in traj.obs.iter().enumerate() {
        state = VariationalFamily::advance(&family, &params, &state, y)?;
        let eta = family.marginal(&params, &state)?;
        let m = eta.to_moments()?;
        print!("t {t}  q mean {:>7.3?}  q var diag {:>6.3?}", m.mean.as_slice(), m.cov.diagonal().as_slice());
        if let Some(prev) = &prev_eta {
            let kernel = family.backward_kernel(&params, prev, &traj.states[t])?;
            print!("  backward mean {:>7.3?}", kernel.mean()?.as_slice());
        }
        println!();
        prev_eta = Some(eta);
    }
    Ok(())
}
