//! Local steering of the full nonlinear system.
//!
//! The linear theory leaves a quadratic-and-up remainder `Q(z)` in the
//! cascade variables. For data close to the steady state that remainder is
//! small, so the control problem is solved by Picard iteration on the source
//! term: steer with source `S = 0`, feed the remainder of the resulting
//! trajectory back in as the next source, repeat until successive weighted
//! trajectories agree. The final control is validated against an independent
//! nonlinear integrator in the physical variables.

use crate::cascade::CascadeTransform;
use crate::reaction::{invariant_functionals, ReactionNetwork, StationaryState};
use crate::spectral::{
    apply_pointwise, simulate_nonlinear, ControlSignal, SimError, SpectralDomain, SpectralField,
    Trajectory,
};
use crate::weights::{sourceterm_control, SourceTermOptions, WeightError, WeightFamily};
use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NonlinearError {
    #[error("invalid fixed-point configuration: {0}")]
    BadConfig(String),
    #[error(
        "initial data violates the mass compatibility condition: \
         zero-mode defect {defect:.3e} exceeds {tolerance:.3e}"
    )]
    MassConditionViolated { defect: f64, tolerance: f64 },
    #[error("initial deviation {norm:.3e} exceeds the admissible radius {radius:.3e}")]
    OutsideRadius { norm: f64, radius: f64 },
    #[error("fixed point not reached after {} iterations", history.len())]
    NotConverged { history: Vec<IterationRecord> },
    #[error(transparent)]
    Steering(#[from] WeightError),
    #[error(transparent)]
    Validation(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct FixedPointConfig {
    pub max_iter: usize,
    /// Stop when successive trajectories agree to this distance in the
    /// weighted sup norm.
    pub contraction_tol: f64,
    /// Largest admissible sup-norm deviation of the transformed data.
    pub smallness_radius: f64,
    pub steering: SourceTermOptions,
    /// Step count of the validating nonlinear integrator.
    pub validation_steps: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iter: 30,
            contraction_tol: 1e-10,
            smallness_radius: 5e-2,
            steering: SourceTermOptions::default(),
            validation_steps: 2048,
        }
    }
}

impl FixedPointConfig {
    fn validate(&self) -> Result<(), NonlinearError> {
        if self.max_iter < 1 {
            return Err(NonlinearError::BadConfig("max_iter must be at least 1".into()));
        }
        if !(self.contraction_tol > 0.0) {
            return Err(NonlinearError::BadConfig(format!(
                "contraction tolerance {} must be positive",
                self.contraction_tol
            )));
        }
        if !(self.smallness_radius >= 0.0) {
            return Err(NonlinearError::BadConfig(format!(
                "smallness radius {} must be nonnegative",
                self.smallness_radius
            )));
        }
        if self.validation_steps == 0 {
            return Err(NonlinearError::BadConfig("validation needs at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    #[serde(rename = "j")]
    pub iteration: usize,
    /// Weighted sup distance between this trajectory and the previous one.
    pub distance: f64,
    /// Ratio of successive distances; absent on the first comparison.
    pub contraction: Option<f64>,
    pub source_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub iterations: Vec<IterationRecord>,
    pub terminal_error: f64,
    pub initial_error: f64,
    /// Measured sup norm of the transformed initial data.
    pub radius: f64,
    /// Largest drift of the conserved-mass differences along the validated
    /// trajectory.
    pub invariant_drift: f64,
}

/// Quadratic-and-up remainder of the transformed reaction term,
/// `Q(z) = G(z) - A_J z`, evaluated pseudo-spectrally.
pub fn q_remainder(
    transform: &CascadeTransform,
    net: &ReactionNetwork,
    s: &StationaryState,
    z: &SpectralField,
    dom: &SpectralDomain,
) -> SpectralField {
    apply_pointwise(dom, net.total_degree(), z, |point| {
        transform.nonlinear_remainder(net, s, point)
    })
}

/// Sup over a uniform grid of `|a(t) - b(t)|_{L^2} / rho_0(t)`, the metric
/// that the fixed-point iteration contracts in. Measured on `[0, until]`,
/// the part of the horizon the steering schedule actually covered.
fn weighted_trajectory_distance(
    a: &Trajectory,
    b: &Trajectory,
    weights: &WeightFamily,
    until: f64,
    samples: usize,
) -> f64 {
    let mut sup = 0.0_f64;
    for i in 0..=samples {
        let t = until * i as f64 / samples as f64;
        let diff = a.interpolate(t).sub(&b.interpolate(t)).norm_l2();
        let rho = weights.rho0(t);
        let ratio = if diff == 0.0 {
            0.0
        } else if rho == 0.0 {
            f64::INFINITY
        } else {
            diff / rho
        };
        sup = sup.max(ratio);
    }
    sup
}

/// Steer the nonlinear system from `u0` to the steady state: Picard
/// iteration on the source term in cascade variables, followed by validation
/// of the synthesized control against the physical-variable integrator. The
/// returned control acts on the first m species in either variable set,
/// since the transform fixes those coordinates.
pub fn fixed_point_control(
    u0: &SpectralField,
    net: &ReactionNetwork,
    s: &StationaryState,
    weights: &WeightFamily,
    dom: &SpectralDomain,
    transform: &CascadeTransform,
    cfg: &FixedPointConfig,
) -> Result<(ControlSignal, Trajectory, ConvergenceReport), NonlinearError> {
    cfg.validate()?;
    let m = net.control_count();
    let horizon = weights.horizon();
    let z0 = transform.to_z(u0, dom);
    let scale = z0.norm_l2();
    let mass_tolerance = 1e-9 * scale.max(1e-9);
    let defect = z0.linv_defect(m);
    if defect > mass_tolerance {
        return Err(NonlinearError::MassConditionViolated { defect, tolerance: mass_tolerance });
    }
    let radius = z0.sup_physical(dom);
    if radius > cfg.smallness_radius {
        return Err(NonlinearError::OutsideRadius { norm: radius, radius: cfg.smallness_radius });
    }

    let sys = transform.linear_cascade();
    let mut history: Vec<IterationRecord> = Vec::new();
    let metric_samples = 256;

    let control = if scale == 0.0 {
        // already at the target: the zero control is the fixed point
        history.push(IterationRecord {
            iteration: 1,
            distance: 0.0,
            contraction: None,
            source_norm: 0.0,
        });
        ControlSignal::zero(m, dom.max_mode(), 0.0, horizon)
    } else {
        let mut current = sourceterm_control(dom, sys, &z0, None, weights, &cfg.steering)?;
        let mut converged = false;
        for j in 1..=cfg.max_iter {
            let (_, prev_traj, prev_report) = current;
            // The remainder of the previous iterate is the next source — but
            // only where that iterate carries signal. Past the end of its
            // executed schedule the state is numerical dust below the
            // steering floor, while the source weight keeps collapsing;
            // feeding the dust forward would make the weighted source norm
            // blow up even though its continuum counterpart vanishes there.
            let cutoff = prev_report.certificates.weighted_until;
            let source = |t: f64| -> DMatrix<f64> {
                if t > cutoff {
                    return DMatrix::zeros(sys.species_count(), dom.mode_count());
                }
                q_remainder(transform, net, s, &prev_traj.interpolate(t), dom)
                    .coeffs()
                    .clone()
            };
            let next = sourceterm_control(dom, sys, &z0, Some(&source), weights, &cfg.steering)?;
            let until = prev_report
                .certificates
                .weighted_until
                .min(next.2.certificates.weighted_until);
            let distance =
                weighted_trajectory_distance(&prev_traj, &next.1, weights, until, metric_samples);
            let contraction = history.last().map(|r| distance / r.distance.max(1e-300));
            history.push(IterationRecord {
                iteration: j,
                distance,
                contraction,
                source_norm: next.2.weighted_source_sup,
            });
            current = next;
            if distance <= cfg.contraction_tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(NonlinearError::NotConverged { history });
        }
        current.0
    };

    // independent validation in the physical variables
    let u_star = SpectralField::constant(s.concentrations(), dom.max_mode(), dom.length());
    let initial_error = u0.sub(&u_star).sup_physical(dom);
    let peak = s.concentrations().iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
    let blowup_bound = 100.0 * (1.0 + peak + initial_error);
    let dt = horizon / cfg.validation_steps as f64;
    let trajectory =
        simulate_nonlinear(dom, net, u0, Some(&control), (0.0, horizon), dt, blowup_bound)?;
    let terminal_error = trajectory.final_state().sub(&u_star).sup_physical(dom);

    let reference = invariant_functionals(net, s, u0, dom.length());
    let mut invariant_drift = 0.0_f64;
    for state in &trajectory.states {
        for (now, base) in invariant_functionals(net, s, state, dom.length())
            .iter()
            .zip(&reference)
        {
            invariant_drift = invariant_drift.max((now - base).abs());
        }
    }

    let report = ConvergenceReport {
        iterations: history,
        terminal_error,
        initial_error,
        radius,
        invariant_drift,
    };
    Ok((control, trajectory, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct RadiusTrial {
    pub radius: f64,
    pub converged: bool,
    pub iterations: usize,
    /// First observed contraction ratio, when at least two comparisons ran.
    pub first_contraction: Option<f64>,
    pub terminal_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RadiusProbe {
    pub trials: Vec<RadiusTrial>,
    /// Largest probed radius that converged.
    pub basin_edge: f64,
}

/// Empirically probe the convergence basin along a fixed direction in the
/// transformed variables: run the fixed point at each radius and record
/// convergence, iteration counts and contraction factors. Divergence beyond
/// the basin is recorded, not raised.
pub fn radius_probe(
    net: &ReactionNetwork,
    s: &StationaryState,
    weights: &WeightFamily,
    dom: &SpectralDomain,
    transform: &CascadeTransform,
    direction: &SpectralField,
    radius_list: &[f64],
    cfg: &FixedPointConfig,
) -> Result<RadiusProbe, NonlinearError> {
    if !radius_list.windows(2).all(|w| w[0] < w[1]) {
        return Err(NonlinearError::BadConfig("probe radii must strictly increase".into()));
    }
    let dir_sup = direction.sup_physical(dom);
    if !(dir_sup > 0.0) {
        return Err(NonlinearError::BadConfig("probe direction must be nonzero".into()));
    }

    let mut trials = Vec::with_capacity(radius_list.len());
    let mut basin_edge = 0.0_f64;
    for &radius in radius_list {
        let u0 = transform.from_z(&direction.scaled(radius / dir_sup), dom);
        let mut local = cfg.clone();
        local.smallness_radius = radius.max(cfg.smallness_radius) * (1.0 + 1e-9) + 1e-12;
        let trial = match fixed_point_control(&u0, net, s, weights, dom, transform, &local) {
            Ok((_, _, report)) => {
                basin_edge = basin_edge.max(radius);
                RadiusTrial {
                    radius,
                    converged: true,
                    iterations: report.iterations.len(),
                    first_contraction: report.iterations.get(1).and_then(|r| r.contraction),
                    terminal_error: Some(report.terminal_error),
                }
            }
            Err(NonlinearError::NotConverged { history }) => RadiusTrial {
                radius,
                converged: false,
                iterations: history.len(),
                first_contraction: history.get(1).and_then(|r| r.contraction),
                terminal_error: None,
            },
            // any steering or validation breakdown at a large radius is the
            // divergence being probed for, not a setup error
            Err(NonlinearError::Steering(_)) | Err(NonlinearError::Validation(_)) => RadiusTrial {
                radius,
                converged: false,
                iterations: 0,
                first_contraction: None,
                terminal_error: None,
            },
            Err(other) => return Err(other),
        };
        trials.push(trial);
    }
    Ok(RadiusProbe { trials, basin_edge })
}
