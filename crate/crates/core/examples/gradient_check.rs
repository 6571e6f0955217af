//! Finite-difference check of the analytic gradients on random instances.
//!
//! cargo run --release --example gradient_check -- [instances] [seed]

use streamvi::gradients::suite::{fd_suite, FD_STEP, FD_TOL};

fn main() -> streamvi::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    println!("step {FD_STEP:e}, relative tolerance {FD_TOL:e}");
    for o in fd_suite(instances, seed)? {
        println!("{:<24} {} / {} failed, max relative error {:.2e}", o.name, o.failures, o.instances, o.max_rel_error);
    }
    Ok(())
}
