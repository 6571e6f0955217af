//! Observation streams: CSV ingestion with sentinel masking, synthetic
//! generation and CSV output.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Trajectory;

/// Standardization applied to one column: `(raw - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub observed: usize,
}

/// Observations `y_0..y_T` with NaN marking masked entries, and the latent
/// states when they are known.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationStream {
    pub ys: Vec<DVector<f64>>,
    pub states: Option<Vec<DVector<f64>>>,
    pub stats: Vec<ColumnStats>,
}

impl ObservationStream {
    pub fn from_trajectory(traj: Trajectory) -> Self {
        Self {
            ys: traj.obs,
            states: Some(traj.states),
            stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim_y(&self) -> usize {
        self.ys.first().map_or(0, |y| y.len())
    }

    /// `true` where the entry is observed.
    pub fn mask(&self, t: usize) -> Vec<bool> {
        self.ys[t].iter().map(|v| !v.is_nan()).collect()
    }

    /// Masks every coordinate of `len` consecutive observations, once every
    /// `every` steps (starting at `every`).
    pub fn mask_segments(&mut self, every: usize, len: usize) {
        if every == 0 || len == 0 {
            return;
        }
        let mut start = every;
        while start < self.ys.len() {
            for t in start..(start + len).min(self.ys.len()) {
                self.ys[t].fill(f64::NAN);
            }
            start += every;
        }
    }
}

fn parse_cell(s: &str, sentinel: f64) -> f64 {
    match s.trim().parse::<f64>() {
        Ok(v) if v == sentinel || !v.is_finite() => f64::NAN,
        Ok(v) => v,
        Err(_) => f64::NAN,
    }
}

/// Reads the named columns; entries equal to `sentinel` (exact comparison) or
/// non-numeric are masked. Observation columns are standardized with the mean
/// and standard deviation of their observed entries; a column with fewer than
/// two observed entries or zero spread keeps scale 1. State columns, if any,
/// are read as-is.
pub fn load_csv(path: &Path, sentinel: f64, columns: &[String], state_columns: &[String]) -> Result<ObservationStream> {
    if columns.is_empty() {
        return Err(Error::Config("no observation columns selected".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = rdr.headers()?.clone();
    let index = |name: &String| header.iter().position(|h| h.trim() == name).ok_or_else(|| Error::MissingColumn(name.clone()));
    let cols: Vec<usize> = columns.iter().map(index).collect::<Result<_>>()?;
    let scols: Vec<usize> = state_columns.iter().map(index).collect::<Result<_>>()?;
    let mut ys = Vec::new();
    let mut xs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        ys.push(DVector::from_iterator(cols.len(), cols.iter().map(|&j| parse_cell(cell(j), sentinel))));
        if !scols.is_empty() {
            xs.push(DVector::from_iterator(scols.len(), scols.iter().map(|&j| cell(j).trim().parse::<f64>().unwrap_or(f64::NAN))));
        }
    }
    if ys.is_empty() {
        return Err(Error::EmptyStream);
    }
    let mut stats = Vec::with_capacity(cols.len());
    for (k, name) in columns.iter().enumerate() {
        let vals: Vec<f64> = ys.iter().map(|y| y[k]).filter(|v| !v.is_nan()).collect();
        let n = vals.len();
        let mean = if n > 0 { vals.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let var = if n > 1 { vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let std = if var > 0.0 { var.sqrt() } else { 1.0 };
        for y in ys.iter_mut() {
            y[k] = (y[k] - mean) / std;
        }
        stats.push(ColumnStats {
            name: name.clone(),
            mean,
            std,
            observed: n,
        });
    }
    Ok(ObservationStream {
        ys,
        states: if scols.is_empty() { None } else { Some(xs) },
        stats,
    })
}

/// Writes `y0.., x0..` columns; masked observations are written as `sentinel`.
pub fn write_csv(path: &Path, stream: &ObservationStream, sentinel: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dy = stream.dim_y();
    let dx = stream.states.as_ref().and_then(|s| s.first()).map_or(0, |x| x.len());
    let mut header: Vec<String> = (0..dy).map(|k| format!("y{k}")).collect();
    header.extend((0..dx).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for t in 0..stream.len() {
        let mut row: Vec<String> = stream.ys[t]
            .iter()
            .map(|v| if v.is_nan() { format!("{sentinel}") } else { format!("{v:.16e}") })
            .collect();
        if let Some(s) = &stream.states {
            row.extend(s[t].iter().map(|v| format!("{v:.16e}")));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
