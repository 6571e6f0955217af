//! Learns the transition and emission matrices of a linear-Gaussian model
//! online and prints the parameter errors over time.
//!
//! cargo run --release --example lgssm_learning -- [T] [seeds] [init] [family]

use streamvi::harness::{run_stream, ExperimentConfig};

fn main() -> streamvi::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let t_len = args.first().map_or("5000", |s| s.as_str());
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let init = args.get(2).map_or("perturbed", |s| s.as_str());
    let family = args.get(3).map_or("amortized", |s| s.as_str());
    let extra = args.get(4).map_or("", |s| s.as_str()).replace(';', "\n");
    for seed in 0..seeds {
        let config = ExperimentConfig::parse(&format!(
            "model.kind = lgssm\nmodel.init = {init}\nmodel.seed = {seed}\nrun.seed = {seed}\nrun.T = {t_len}\nengine.n_particles = 100\nvariational.kind = {family}\n{extra}\n"
        ))?;
        let out = run_stream(&config)?;
        let every = (out.records.len() / 10).max(1);
        for r in out.records.iter().step_by(every).chain(out.records.last()) {
            let mae: Vec<String> = r.param_mae.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
            println!("seed {seed} t {:>6} elbo/t {:>9.4} |grad theta| {:>9.3} {}", r.t, r.elbo_over_t, r.grad_theta_norm, mae.join(" "));
        }
    }
    Ok(())
}
