//! Configuration ingestion for the command-line harness: the run
//! configuration document, the reaction-network document it references, and
//! the standalone finite-dimensional problem description.
//!
//! Everything is plain JSON with fixed field names. Parsing and structural
//! validation are separated from filesystem access so the byte-level entry
//! points can be exercised directly (and fuzzed).

use crate::finite_dim::{FiniteDimError, ModeSystem};
use crate::reaction::{ReactionNetwork, StationaryState};
use crate::spectral::SpectralDomain;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl ConfigError {
    fn field(name: &str, problem: impl std::fmt::Display) -> Self {
        ConfigError::Invalid(format!("field `{name}`: {problem}"))
    }
}

/// Reaction-network document: `n, m, alpha, beta, d, u_star (optional),
/// domain_length, omega` with exact field names.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub n: usize,
    pub m: usize,
    pub alpha: Vec<u32>,
    pub beta: Vec<u32>,
    pub d: Vec<f64>,
    #[serde(default)]
    pub u_star: Option<Vec<f64>>,
    pub domain_length: f64,
    pub omega: [f64; 2],
}

impl NetworkSpec {
    pub fn parse(bytes: &[u8]) -> Result<Self, ConfigError> {
        let spec: NetworkSpec =
            serde_json::from_slice(bytes).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::parse(&bytes)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 2 {
            return Err(ConfigError::field("n", "need at least two species"));
        }
        for (name, len) in [("alpha", self.alpha.len()), ("beta", self.beta.len()), ("d", self.d.len())]
        {
            if len != self.n {
                return Err(ConfigError::field(name, format!("expected {} entries, got {len}", self.n)));
            }
        }
        if let Some(u) = &self.u_star {
            if u.len() != self.n {
                return Err(ConfigError::field(
                    "u_star",
                    format!("expected {} entries, got {}", self.n, u.len()),
                ));
            }
        }
        if !(self.domain_length.is_finite() && self.domain_length > 0.0) {
            return Err(ConfigError::field("domain_length", "must be positive and finite"));
        }
        let [a, b] = self.omega;
        if !(a.is_finite() && b.is_finite() && 0.0 <= a && a < b && b <= self.domain_length) {
            return Err(ConfigError::field(
                "omega",
                "must be a nondegenerate subinterval of [0, domain_length]",
            ));
        }
        Ok(())
    }

    /// Instantiate the network and its stationary state (all-ones unless
    /// `u_star` says otherwise; the residual check rejects non-stationary
    /// choices).
    pub fn build(&self) -> Result<(ReactionNetwork, StationaryState), ConfigError> {
        let net = ReactionNetwork::new(self.m, self.alpha.clone(), self.beta.clone(), self.d.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let u_star = self.u_star.clone().unwrap_or_else(|| vec![1.0; self.n]);
        let s = StationaryState::new(&net, u_star).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok((net, s))
    }

    pub fn domain(&self, max_mode: usize, quad_points: usize) -> Result<SpectralDomain, ConfigError> {
        SpectralDomain::new(self.domain_length, max_mode, (self.omega[0], self.omega[1]), quad_points)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

/// Weight-family parameters; `q` and `p` fall back to the library defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    /// The spectral constant M of the weight pair.
    pub scale: f64,
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
}

/// Standalone per-mode control problem: `y' = (-lambda diag(d) + A_J) y + B h`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdProblem {
    pub n: usize,
    pub m: usize,
    pub d: Vec<f64>,
    #[serde(rename = "A_J")]
    pub a_j: Vec<Vec<f64>>,
    pub lambda: f64,
    pub tau: f64,
    pub y0: Vec<f64>,
}

impl FdProblem {
    pub fn parse(bytes: &[u8]) -> Result<Self, ConfigError> {
        let p: FdProblem =
            serde_json::from_slice(bytes).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.n == 0 {
            return Err(ConfigError::field("n", "must be positive"));
        }
        for (name, len) in [("d", self.d.len()), ("y0", self.y0.len()), ("A_J", self.a_j.len())] {
            if len != self.n {
                return Err(ConfigError::field(name, format!("expected {} entries, got {len}", self.n)));
            }
        }
        for (i, row) in self.a_j.iter().enumerate() {
            if row.len() != self.n {
                return Err(ConfigError::field(
                    "A_J",
                    format!("row {i} has {} entries, expected {}", row.len(), self.n),
                ));
            }
        }
        let finite = self.d.iter().chain(self.y0.iter()).chain(self.a_j.iter().flatten());
        for v in finite {
            if !v.is_finite() {
                return Err(ConfigError::Invalid("matrix and vector entries must be finite".into()));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(ConfigError::field("lambda", "must be nonnegative and finite"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ConfigError::field("tau", "must be positive and finite"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<(ModeSystem, DVector<f64>), FiniteDimError> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                a[(i, j)] = self.a_j[i][j];
            }
            a[(i, i)] -= self.lambda * self.d[i];
        }
        let sys = ModeSystem::new(a, self.m, self.lambda, self.tau)?;
        Ok((sys, DVector::from_column_slice(&self.y0)))
    }
}

fn default_max_mode() -> usize {
    16
}

fn default_horizon() -> f64 {
    0.5
}

fn default_perturbation() -> f64 {
    1e-2
}

/// The run configuration document handed to every subcommand.
///
/// Only `network` points at another file; everything else is inline. Fields
/// a given subcommand does not use are ignored by it but still validated.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub network: Option<PathBuf>,
    #[serde(default = "default_max_mode")]
    pub max_mode: usize,
    #[serde(default)]
    pub quad_points: Option<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Sup-norm amplitude of the seeded initial perturbation.
    #[serde(default = "default_perturbation")]
    pub perturbation: f64,
    #[serde(default)]
    pub weights: Option<WeightSpec>,
    /// Penalty values for the `penalized-hum` sweep (strictly decreasing).
    #[serde(default)]
    pub eps_list: Option<Vec<f64>>,
    /// Horizon list for the `sweep-cost` study (decreasing).
    #[serde(default)]
    pub cost_horizons: Option<Vec<f64>>,
    #[serde(default)]
    pub target_tol: Option<f64>,
    /// Uniform step count for simulation/validation grids.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Control time-nodes for the penalized problem.
    #[serde(default)]
    pub time_nodes: Option<usize>,
    #[serde(default)]
    pub fdcontrol: Option<FdProblem>,
}

impl RunConfig {
    pub fn parse(bytes: &[u8]) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_slice(bytes).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read the document and resolve the network path relative to it.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), ConfigError> {
        let bytes = std::fs::read(path).map_err(|e| ConfigError::Unreadable {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::parse(&bytes)?;
        if let Some(net) = &cfg.network {
            let resolved = if net.is_relative() {
                path.parent().unwrap_or_else(|| Path::new(".")).join(net)
            } else {
                net.clone()
            };
            if !resolved.exists() {
                return Err(ConfigError::field(
                    "network",
                    format!("referenced file {} does not exist", resolved.display()),
                ));
            }
            cfg.network = Some(resolved);
        }
        Ok((cfg, bytes))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.max_mode < 2 {
            return Err(ConfigError::field("max_mode", "need at least two retained modes"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ConfigError::field("horizon", "must be positive and finite"));
        }
        if !(self.perturbation.is_finite() && self.perturbation > 0.0) {
            return Err(ConfigError::field("perturbation", "must be positive and finite"));
        }
        if let Some(w) = &self.weights {
            if !(w.scale.is_finite() && w.scale > 0.0) {
                return Err(ConfigError::field("weights.scale", "must be positive and finite"));
            }
            for (name, v) in [("weights.q", w.q), ("weights.p", w.p)] {
                if let Some(v) = v {
                    if !(v.is_finite() && v > 0.0) {
                        return Err(ConfigError::field(name, "must be positive and finite"));
                    }
                }
            }
        }
        if let Some(eps) = &self.eps_list {
            if eps.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
                return Err(ConfigError::field("eps_list", "entries must be positive and finite"));
            }
            if eps.windows(2).any(|w| w[1] >= w[0]) {
                return Err(ConfigError::field("eps_list", "must be strictly decreasing"));
            }
        }
        if let Some(hs) = &self.cost_horizons {
            if hs.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
                return Err(ConfigError::field(
                    "cost_horizons",
                    "entries must be positive and finite",
                ));
            }
        }
        if let Some(tol) = self.target_tol {
            if !(tol.is_finite() && tol > 0.0) {
                return Err(ConfigError::field("target_tol", "must be positive and finite"));
            }
        }
        if self.steps == Some(0) {
            return Err(ConfigError::field("steps", "must be positive"));
        }
        if let Some(k) = self.time_nodes {
            if k < 8 {
                return Err(ConfigError::field("time_nodes", "need at least 8 control nodes"));
            }
        }
        if let Some(fd) = &self.fdcontrol {
            fd.validate()?;
        }
        Ok(())
    }

    /// The network document is mandatory for the PDE subcommands.
    pub fn require_network(&self) -> Result<NetworkSpec, ConfigError> {
        let path = self
            .network
            .as_ref()
            .ok_or_else(|| ConfigError::field("network", "required by this subcommand"))?;
        NetworkSpec::load(path)
    }

    pub fn quadrature_points(&self) -> usize {
        self.quad_points.unwrap_or(3 * self.max_mode + 4)
    }
}
