//! Per-step metric records and their CSV/summary output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub t: usize,
    /// ELBO estimate divided by the number of observations seen, `t + 1`.
    pub elbo_over_t: f64,
    pub grad_phi_norm: f64,
    pub grad_theta_norm: f64,
    pub step_time_ns: u64,
    /// Mean absolute deviation from the generative value, per learnable block.
    pub param_mae: Vec<(String, f64)>,
    /// RMSE of the particle mean of `x_t` against the true state.
    pub filt_rmse: Option<f64>,
    /// RMSE of the pairwise estimate of `x_{t-1}` against the true state.
    pub smooth_rmse: Option<f64>,
}

pub const FIXED_COLUMNS: [&str; 5] = ["t", "elbo_over_t", "grad_phi_norm", "grad_theta_norm", "step_time_ns"];

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(records: &[StreamRecord]) -> Vec<String> {
    let mut h: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    if records.iter().any(|r| r.filt_rmse.is_some()) {
        h.push("filt_rmse".into());
    }
    if records.iter().any(|r| r.smooth_rmse.is_some()) {
        h.push("smooth_rmse".into());
    }
    if let Some(r) = records.first() {
        h.extend(r.param_mae.iter().map(|(n, _)| format!("mae_{n}")));
    }
    h
}

/// Writes the records as CSV: the five fixed columns, then optional metric
/// columns; floats carry 17 significant digits and missing values are empty.
pub fn emit_report(records: &[StreamRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let h = header(records);
    w.write_record(&h)?;
    let has_filt = h.iter().any(|c| c == "filt_rmse");
    let has_smooth = h.iter().any(|c| c == "smooth_rmse");
    for r in records {
        let mut row = vec![r.t.to_string(), fmt(r.elbo_over_t), fmt(r.grad_phi_norm), fmt(r.grad_theta_norm), r.step_time_ns.to_string()];
        if has_filt {
            row.push(r.filt_rmse.map(fmt).unwrap_or_default());
        }
        if has_smooth {
            row.push(r.smooth_rmse.map(fmt).unwrap_or_default());
        }
        row.extend(r.param_mae.iter().map(|(_, v)| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<Vec<StreamRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let h: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if h.len() < FIXED_COLUMNS.len() || h[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(Error::Config(format!("`{}` is not a metric report", path.display())));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number `{s}`"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let mut r = StreamRecord {
            t: rec[0].parse().map_err(|_| Error::Config("bad t".into()))?,
            elbo_over_t: num(&rec[1])?,
            grad_phi_norm: num(&rec[2])?,
            grad_theta_norm: num(&rec[3])?,
            step_time_ns: rec[4].parse().map_err(|_| Error::Config("bad step time".into()))?,
            param_mae: Vec::new(),
            filt_rmse: None,
            smooth_rmse: None,
        };
        for (k, name) in h.iter().enumerate().skip(FIXED_COLUMNS.len()) {
            match name.as_str() {
                "filt_rmse" => r.filt_rmse = opt(&rec[k])?,
                "smooth_rmse" => r.smooth_rmse = opt(&rec[k])?,
                n => r.param_mae.push((n.trim_start_matches("mae_").to_string(), num(&rec[k])?)),
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Final metrics of a run or evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seed: u64,
    pub steps: usize,
    pub final_elbo_over_t: Option<f64>,
    /// 1-step smoothing error.
    pub kappa1: Option<f64>,
    /// Filtering error.
    pub kappa2: Option<f64>,
    pub param_mae: Vec<(String, f64)>,
    pub clip_events: usize,
    pub projections: usize,
    pub ar_fallbacks: u64,
    pub eval: Option<EvalMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub kappa1: Option<f64>,
    pub kappa2: Option<f64>,
    pub elbo_over_t: f64,
    pub param_mae: Vec<(String, f64)>,
}

/// Plain-text summary: final metrics, reference values and the configuration.
pub fn summary_text(s: &Summary, config_text: &str, notes: &[String]) -> String {
    let mut out = String::new();
    let opt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.6e}"));
    let _ = writeln!(out, "seed: {}", s.seed);
    let _ = writeln!(out, "steps: {}", s.steps);
    let _ = writeln!(out, "final elbo/t: {}", opt(s.final_elbo_over_t));
    let _ = writeln!(out, "kappa1 (1-step smoothing RMSE): {}", opt(s.kappa1));
    let _ = writeln!(out, "kappa2 (filtering RMSE): {}", opt(s.kappa2));
    for (n, v) in &s.param_mae {
        let _ = writeln!(out, "MAE {n}: {v:.6e}");
    }
    let _ = writeln!(out, "gradient clip events: {}", s.clip_events);
    let _ = writeln!(out, "spectral projections: {}", s.projections);
    let _ = writeln!(out, "accept-reject fallbacks: {}", s.ar_fallbacks);
    if let Some(e) = &s.eval {
        let _ = writeln!(out, "held-out kappa1: {}", opt(e.kappa1));
        let _ = writeln!(out, "held-out kappa2: {}", opt(e.kappa2));
        let _ = writeln!(out, "held-out elbo/t: {:.6e}", e.elbo_over_t);
    }
    for n in notes {
        let _ = writeln!(out, "note: {n}");
    }
    if !config_text.is_empty() {
        let _ = writeln!(out, "\n[config]\n{config_text}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(t: usize, v: f64) -> StreamRecord {
        StreamRecord {
            t,
            elbo_over_t: v,
            grad_phi_norm: v.abs() * 3.0,
            grad_theta_norm: 0.1 / (1.0 + v.abs()),
            step_time_ns: 12345,
            param_mae: vec![("F".into(), v * v), ("G".into(), 1.0 / 3.0)],
            filt_rmse: Some(v.abs()),
            smooth_rmse: if t == 0 { None } else { Some(2.0 * v.abs()) },
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        let f = tempfile::NamedTempFile::new().unwrap();
        emit_report(&[], f.path()).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert_eq!(text.trim(), FIXED_COLUMNS.join(","));
        assert!(read_report(f.path()).unwrap().is_empty());
    }

    #[test]
    fn summary_mentions_seed() {
        let s = Summary { seed: 4242, ..Default::default() };
        assert!(summary_text(&s, "run.seed = 4242\n", &[]).contains("seed: 4242"));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(-1e300f64..1e300, 1..20)) {
            let records: Vec<_> = vals.iter().enumerate().map(|(t, v)| rec(t, *v)).collect();
            let f = tempfile::NamedTempFile::new().unwrap();
            emit_report(&records, f.path()).unwrap();
            let back = read_report(f.path()).unwrap();
            prop_assert_eq!(back, records);
        }
    }
}
