//! Artifact writers for the command-line harness: trajectory CSVs, small
//! numeric tables, JSON reports, and the reproducibility sidecar.
//!
//! Float formatting goes through Rust's shortest-roundtrip `Display`, so a
//! fixed seed yields byte-identical files on a given platform. Nothing here
//! records wall-clock time.

use crate::spectral::{SpectralDomain, Trajectory};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("cannot write {path}: {reason}")]
pub struct ReportError {
    pub path: PathBuf,
    pub reason: String,
}

fn persist(path: &Path, contents: &str) -> Result<(), ReportError> {
    std::fs::write(path, contents)
        .map_err(|e| ReportError { path: path.to_path_buf(), reason: e.to_string() })
}

/// Reproducibility sidecar written beside every artifact set.
#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    /// SHA-256 of the exact configuration bytes the run was launched with.
    pub config_sha256: String,
    pub version: String,
    pub seed: u64,
}

impl Metadata {
    pub fn new(config_bytes: &[u8], seed: u64) -> Self {
        let digest = Sha256::digest(config_bytes);
        let mut hex = String::with_capacity(64);
        for byte in digest {
            let _ = write!(hex, "{byte:02x}");
        }
        Metadata { config_sha256: hex, version: env!("CARGO_PKG_VERSION").to_string(), seed }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| ReportError { path: path.to_path_buf(), reason: e.to_string() })?;
    persist(path, &format!("{body}\n"))
}

/// At most `max_rows` indices spread uniformly over `0..len`, always keeping
/// the first and last entry.
fn thinned(len: usize, max_rows: usize) -> Vec<usize> {
    if len <= max_rows || max_rows < 2 {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> =
        (0..max_rows).map(|i| i * (len - 1) / (max_rows - 1)).collect();
    idx.dedup();
    idx
}

/// Modal trajectory table with header `t,species,mode,coeff`.
pub fn write_modal_csv(
    path: &Path,
    traj: &Trajectory,
    max_times: usize,
) -> Result<(), ReportError> {
    let mut out = String::from("t,species,mode,coeff\n");
    for &ti in &thinned(traj.times.len(), max_times) {
        let t = traj.times[ti];
        let coeffs = traj.states[ti].coeffs();
        for i in 0..coeffs.nrows() {
            for k in 0..coeffs.ncols() {
                let _ = writeln!(out, "{t},{i},{k},{}", coeffs[(i, k)]);
            }
        }
    }
    persist(path, &out)
}

/// Physical-space companion table with header `t,x,species,value`, evaluated
/// on the midpoint grid.
pub fn write_physical_csv(
    path: &Path,
    traj: &Trajectory,
    dom: &SpectralDomain,
    points: usize,
    max_times: usize,
) -> Result<(), ReportError> {
    let xs = dom.collocation_points(points);
    let mut out = String::from("t,x,species,value\n");
    for &ti in &thinned(traj.times.len(), max_times) {
        let t = traj.times[ti];
        let vals = traj.states[ti].values_on_grid(dom, points);
        for (j, x) in xs.iter().enumerate() {
            for i in 0..vals.nrows() {
                let _ = writeln!(out, "{t},{x},{i},{}", vals[(i, j)]);
            }
        }
    }
    persist(path, &out)
}

/// Small all-numeric table (sweep outputs, sampled ODE paths).
pub fn write_table_csv(
    path: &Path,
    header: &str,
    rows: &[Vec<f64>],
) -> Result<(), ReportError> {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    persist(path, &out)
}
