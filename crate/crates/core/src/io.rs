//! Output management: trajectory CSV schemas, atomic file writes, generator
//! snapshots, operator dumps, and plot-data extraction.
//!
//! Floats are written with Rust's shortest round-trip formatting so reruns
//! with identical seeds produce byte-identical files.

use crate::error::{Error, Result};
use crate::flow::Trajectory;
use crate::generator::Generator;
use crate::operators::{OperatorA, Spectrum};
use crate::trainer::TrainLog;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Write a file atomically (temp file in the same directory, then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// Column header shared by flow and training trajectories.
pub const FLOW_CSV_HEADER: &str =
    "iter,F,mmd,mmd_ab,lambda_i,a,chi,eps,bound,rate_residual,stepcond_ok,wallclock_ms";

/// Extra columns appended by the trainer.
pub const GAN_CSV_EXTRA: &str = "critic_M,critic_steps,grad_norm_w,grad_norm_theta";

/// Render a flow trajectory as CSV.
pub fn flow_csv(traj: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str(FLOW_CSV_HEADER);
    out.push('\n');
    for r in &traj.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            fmt_f64(r.f_value),
            fmt_f64(r.mmd),
            fmt_f64(r.mmd_ab),
            fmt_f64(r.lambda_i),
            fmt_f64(r.alignment),
            fmt_f64(r.chi),
            fmt_f64(r.eps),
            fmt_f64(r.bound),
            fmt_f64(r.rate_residual),
            fmt_f64(r.stepcond_ok),
            fmt_f64(r.wallclock_ms),
        );
    }
    out
}

/// Render a training log with the flow schema plus critic diagnostics;
/// flow-only columns are NaN.
pub fn gan_csv(log: &TrainLog) -> String {
    let mut out = String::new();
    out.push_str(FLOW_CSV_HEADER);
    out.push(',');
    out.push_str(GAN_CSV_EXTRA);
    out.push('\n');
    for r in &log.rows {
        let _ = writeln!(
            out,
            "{},{},{},NaN,NaN,NaN,NaN,NaN,NaN,NaN,NaN,{},{},{},{},{}",
            r.iter,
            fmt_f64(r.f_value),
            fmt_f64(r.mmd),
            fmt_f64(r.wallclock_ms),
            fmt_f64(r.critic_m),
            r.critic_steps,
            fmt_f64(r.grad_norm_w),
            fmt_f64(r.grad_norm_theta),
        );
    }
    out
}

pub const SNAPSHOT_VERSION: u32 = 1;

/// Serializable generator state: architecture plus the flat parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSnapshot {
    pub version: u32,
    pub widths: Vec<usize>,
    pub constant: bool,
    pub theta: Vec<f64>,
    pub seed: u64,
    pub iter: usize,
}

impl GeneratorSnapshot {
    pub fn new(gen: &Generator, theta: &Array1<f64>, seed: u64, iter: usize) -> Self {
        GeneratorSnapshot {
            version: SNAPSHOT_VERSION,
            widths: gen.widths.clone(),
            constant: gen.constant,
            theta: theta.to_vec(),
            seed,
            iter,
        }
    }

    pub fn restore(&self) -> Result<(Generator, Array1<f64>)> {
        if self.version != SNAPSHOT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported snapshot version {}",
                self.version
            )));
        }
        let gen = if self.constant {
            Generator::constant(*self.widths.last().unwrap())?
        } else {
            Generator::mlp(
                self.widths[0],
                &self.widths[1..self.widths.len() - 1],
                *self.widths.last().unwrap(),
            )?
        };
        let theta = Array1::from_vec(self.theta.clone());
        if theta.len() != gen.param_count() {
            return Err(Error::DimensionMismatch {
                expected: gen.param_count(),
                got: theta.len(),
                context: "snapshot parameter vector",
            });
        }
        Ok((gen, theta))
    }
}

/// Dump the operator matrix and (optionally) its spectrum for offline
/// inspection. Intended for desk-scale operators.
pub fn operator_csv(a: &OperatorA, spectrum: Option<&Spectrum>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# A: {} x {}", a.param_dim(), a.feature_dim());
    for i in 0..a.param_dim() {
        let row: Vec<String> = (0..a.feature_dim())
            .map(|j| fmt_f64(a.matrix()[[i, j]]))
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    if let Some(s) = spectrum {
        let _ = writeln!(out, "# eigenvalues of D (descending)");
        let vals: Vec<String> = s.eigenvalues.iter().map(|&v| fmt_f64(v)).collect();
        let _ = writeln!(out, "{}", vals.join(","));
    }
    out
}

/// `(iter, mmd)` pairs pulled out of a trajectory CSV by header name.
pub fn parse_loss_curve(csv: &str) -> Result<Vec<(u64, f64)>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidConfig("empty trajectory file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let iter_idx = cols
        .iter()
        .position(|c| *c == "iter")
        .ok_or_else(|| Error::InvalidConfig("trajectory is missing an 'iter' column".into()))?;
    let mmd_idx = cols
        .iter()
        .position(|c| *c == "mmd")
        .ok_or_else(|| Error::InvalidConfig("trajectory is missing an 'mmd' column".into()))?;
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() <= iter_idx.max(mmd_idx) {
            return Err(Error::InvalidConfig(format!(
                "malformed trajectory row {}",
                lineno + 2
            )));
        }
        let iter: u64 = fields[iter_idx]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad iter field on row {}", lineno + 2)))?;
        let mmd: f64 = fields[mmd_idx]
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad mmd field on row {}", lineno + 2)))?;
        out.push((iter, mmd));
    }
    Ok(out)
}

/// Keep at most `max_points` rows, always retaining the first and last.
pub fn downsample(rows: &[(u64, f64)], max_points: usize) -> Vec<(u64, f64)> {
    let n = rows.len();
    if n <= max_points || max_points < 2 {
        return rows.to_vec();
    }
    let mut out = Vec::with_capacity(max_points);
    let stride = (n - 1) as f64 / (max_points - 1) as f64;
    let mut last_idx = usize::MAX;
    for k in 0..max_points {
        let idx = ((k as f64 * stride).round() as usize).min(n - 1);
        if idx != last_idx {
            out.push(rows[idx]);
            last_idx = idx;
        }
    }
    if out.last().map(|r| r.0) != rows.last().map(|r| r.0) {
        out.push(*rows.last().unwrap());
    }
    out
}

/// CSV for the downsampled loss curve.
pub fn loss_curve_csv(rows: &[(u64, f64)]) -> String {
    let mut out = String::from("iter,mmd\n");
    for (iter, mmd) in rows {
        let _ = writeln!(out, "{iter},{}", fmt_f64(*mmd));
    }
    out
}

/// Scatter CSV of target and generated points (2-D).
pub fn scatter_csv(target: &Array2<f64>, generated: &Array2<f64>) -> String {
    let mut out = String::from("x,y,source\n");
    for row in target.outer_iter() {
        let _ = writeln!(out, "{},{},target", fmt_f64(row[0]), fmt_f64(row[1]));
    }
    for row in generated.outer_iter() {
        let _ = writeln!(out, "{},{},generated", fmt_f64(row[0]), fmt_f64(row[1]));
    }
    out
}
