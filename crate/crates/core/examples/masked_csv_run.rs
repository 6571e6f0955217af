//! Writes a simulated stream with masked segments to CSV, reads it back by
//! column name and learns a residual nonlinear model from it.
//!
//! cargo run --release --example masked_csv_run -- [T]

use streamvi::harness::{prepare, run_stream, write_csv, ExperimentConfig};

fn main() -> streamvi::Result<()> {
    let t_len = std::env::args().nth(1).unwrap_or_else(|| "300".into());
    let dir = std::env::temp_dir().join("streamvi_masked_example");
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join("stream.csv");

    let sim = ExperimentConfig::parse(&format!(
        "model.kind = residual\nmodel.dx = 2\nmodel.dy = 3\nmodel.hidden = 8\nrun.T = {t_len}\nrun.mask_every = 50\nrun.mask_len = 10\n"
    ))?;
    let exp = prepare(sim.clone())?;
    let masked = exp.stream.ys.iter().filter(|y| y.iter().any(|v| v.is_nan())).count();
    write_csv(&csv, &exp.stream, exp.config.io.sentinel)?;
    println!("wrote {} steps ({masked} with masked entries) to {}", exp.stream.len(), csv.display());

    let mut run = sim;
    run.io.data = Some(csv);
    run.io.columns = vec!["y0".into(), "y1".into(), "y2".into()];
    run.io.state_columns = vec!["x0".into(), "x1".into()];
    let out = run_stream(&run)?;
    for r in out.records.iter().step_by(out.records.len() / 5 + 1) {
        println!("t {:>4}  ELBO/t {:>9.4}  filtering RMSE {:.3}", r.t, r.elbo_over_t, r.filt_rmse.unwrap_or(f64::NAN));
    }
    Ok(())
}
