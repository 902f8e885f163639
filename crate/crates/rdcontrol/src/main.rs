//! Command-line harness: loads a run configuration, dispatches to the
//! library, prints a JSON summary, and persists CSV/JSON artifacts with a
//! reproducibility sidecar.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 assumption violation. Typed module errors are reported on stderr as
//! `{"error": {"code", "message"}}`.

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdcontrol::cascade::{reciprocal_product_identity, CascadeTransform, TransformError};
use rdcontrol::config::{ConfigError, RunConfig};
use rdcontrol::finite_dim::{brunovsky_control, FiniteDimError};
use rdcontrol::hum::{epsilon_sweep, HumError};
use rdcontrol::lebeau::{cost_blowup_sweep, lr_drive, DriveOptions, LRError};
use rdcontrol::nonlinear::{fixed_point_control, FixedPointConfig, NonlinearError};
use rdcontrol::reaction::{NetworkError, ReactionNetwork, StationaryState};
use rdcontrol::report::{self, Metadata, ReportError};
use rdcontrol::spectral::{
    random_linv_field, simulate_nonlinear, SimError, SpectralDomain, SpectralField,
};
use rdcontrol::weights::{SourceTermOptions, WeightError, WeightFamily};
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rdcontrol", version, about = "Null-control synthesis for reaction-diffusion cascades")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory (overrides the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// PRNG seed (overrides the config's `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress the stdout summary.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Check the algebraic identities behind the cascade transform.
    VerifyIdentities,
    /// Free nonlinear run from seeded perturbed data.
    Simulate,
    /// Linear null control for the cascade by frequency splitting.
    ControlLinear,
    /// Nonlinear local null control by fixed-point iteration.
    ControlNonlinear,
    /// Penalty sweep for the penalized terminal-constraint problem.
    PenalizedHum,
    /// Control cost versus horizon, with the exponential fit.
    SweepCost,
    /// Standalone per-mode finite-dimensional steering.
    Fdcontrol,
}

struct CliError {
    exit: i32,
    code: &'static str,
    message: String,
}

impl CliError {
    fn config(code: &'static str, message: impl Into<String>) -> Self {
        CliError { exit: 2, code, message: message.into() }
    }
    fn numerical(code: &'static str, message: impl Into<String>) -> Self {
        CliError { exit: 3, code, message: message.into() }
    }
    fn assumption(code: &'static str, message: impl Into<String>) -> Self {
        CliError { exit: 4, code, message: message.into() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::config("config-invalid", e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::config("artifact-io", e.to_string())
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::config("network-invalid", e.to_string())
    }
}

impl From<TransformError> for CliError {
    fn from(e: TransformError) -> Self {
        CliError::assumption("assumption-violation", e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::BlowupDetected { .. } => "blowup",
            SimError::NonfiniteState { .. } => "nonfinite-state",
            SimError::ShapeMismatch { .. } => "shape-mismatch",
            SimError::BadTimeGrid { .. } => "bad-time-grid",
        };
        CliError::numerical(code, e.to_string())
    }
}

impl From<LRError> for CliError {
    fn from(e: LRError) -> Self {
        match e {
            LRError::MassConditionViolated { .. } => {
                CliError::assumption("mass-condition", e.to_string())
            }
            LRError::NotLowFrequency { .. } => {
                CliError::assumption("not-low-frequency", e.to_string())
            }
            LRError::RankDeficient { .. } => CliError::numerical("rank-deficient", e.to_string()),
            LRError::NoDecayDetected { .. } => CliError::numerical("no-decay", e.to_string()),
            LRError::DegenerateSetup => CliError::config("degenerate-setup", e.to_string()),
            LRError::Sim(inner) => inner.into(),
        }
    }
}

impl From<WeightError> for CliError {
    fn from(e: WeightError) -> Self {
        match e {
            WeightError::BadParameters(_) => CliError::config("weights-invalid", e.to_string()),
            WeightError::WeightedSourceUnbounded { .. } => {
                CliError::assumption("weighted-source-unbounded", e.to_string())
            }
            WeightError::SourceLeavesInvariantClass(_) => {
                CliError::assumption("source-outside-class", e.to_string())
            }
            WeightError::ScheduleExhausted { .. } => {
                CliError::numerical("schedule-exhausted", e.to_string())
            }
            WeightError::ZeroDenominator => CliError::numerical("zero-denominator", e.to_string()),
            WeightError::Drive(inner) => inner.into(),
        }
    }
}

impl From<HumError> for CliError {
    fn from(e: HumError) -> Self {
        match e {
            HumError::BadSetup(_) => CliError::config("penalized-setup", e.to_string()),
            HumError::IllConditioned { .. } => {
                CliError::numerical("ill-conditioned", e.to_string())
            }
            HumError::Sim(inner) => inner.into(),
        }
    }
}

impl From<NonlinearError> for CliError {
    fn from(e: NonlinearError) -> Self {
        match e {
            NonlinearError::BadConfig(_) => CliError::config("fixed-point-config", e.to_string()),
            NonlinearError::MassConditionViolated { .. } => {
                CliError::assumption("mass-condition", e.to_string())
            }
            NonlinearError::OutsideRadius { .. } => {
                CliError::assumption("outside-radius", e.to_string())
            }
            NonlinearError::NotConverged { .. } => {
                CliError::numerical("not-converged", e.to_string())
            }
            NonlinearError::Steering(inner) => inner.into(),
            NonlinearError::Validation(inner) => inner.into(),
        }
    }
}

impl From<FiniteDimError> for CliError {
    fn from(e: FiniteDimError) -> Self {
        match e {
            FiniteDimError::AssumptionViolation(_) => {
                CliError::assumption("assumption-violation", e.to_string())
            }
            FiniteDimError::LambdaZeroUnsupported { .. } => {
                CliError::assumption("lambda-zero-unsupported", e.to_string())
            }
            FiniteDimError::OrderTooHigh { .. }
            | FiniteDimError::InvalidHorizon(_)
            | FiniteDimError::ShapeMismatch(_) => {
                CliError::config("finite-dim-config", e.to_string())
            }
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{}", json!({ "error": { "code": e.code, "message": e.message } }));
            std::process::exit(e.exit);
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("config-missing", "--config PATH is required"))?;
    let (mut cfg, config_bytes) = RunConfig::load(path)?;
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::config("artifact-io", format!("cannot create {}: {e}", dir.display())))?;
        report::write_json(&dir.join("metadata.json"), &Metadata::new(&config_bytes, cfg.seed))?;
    }

    let summary = match cli.command {
        Command::VerifyIdentities => verify_identities(&cfg)?,
        Command::Simulate => simulate(&cfg)?,
        Command::ControlLinear => control_linear(&cfg)?,
        Command::ControlNonlinear => control_nonlinear(&cfg)?,
        Command::PenalizedHum => penalized_hum(&cfg)?,
        Command::SweepCost => sweep_cost(&cfg)?,
        Command::Fdcontrol => fdcontrol(&cfg)?,
    };
    if !cli.quiet {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    }
    Ok(())
}

struct PdeSetup {
    dom: SpectralDomain,
    net: ReactionNetwork,
    s: StationaryState,
    transform: CascadeTransform,
}

fn pde_setup(cfg: &RunConfig) -> Result<PdeSetup, CliError> {
    let spec = cfg.require_network()?;
    let (net, s) = spec.build()?;
    let dom = spec.domain(cfg.max_mode, cfg.quadrature_points())?;
    let transform = CascadeTransform::new(&net, &s)?;
    Ok(PdeSetup { dom, net, s, transform })
}

fn out_dir(cfg: &RunConfig) -> Option<&Path> {
    cfg.out_dir.as_deref()
}

fn weight_family(cfg: &RunConfig, default_scale: f64) -> Result<WeightFamily, CliError> {
    let family = match &cfg.weights {
        Some(w) => WeightFamily::new(
            w.scale,
            w.q.unwrap_or(1.2),
            w.p.unwrap_or(4.0),
            cfg.horizon,
        )?,
        None => WeightFamily::with_default_exponents(default_scale, cfg.horizon)?,
    };
    Ok(family)
}

/// Seeded smooth perturbation of the steady state with prescribed physical
/// sup-norm, compatible with the controllable class.
fn perturbed_initial(
    setup: &PdeSetup,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> (SpectralField, SpectralField) {
    let u_star = SpectralField::constant(
        setup.s.concentrations(),
        setup.dom.max_mode(),
        setup.dom.length(),
    );
    let direction = random_linv_field(
        setup.net.species_count(),
        setup.dom.max_mode(),
        setup.net.control_count(),
        1.0,
        rng,
    );
    let deviation = setup.transform.from_z(&direction, &setup.dom).sub(&u_star);
    let sup = deviation.sup_physical(&setup.dom);
    let u0 = u_star.add(&deviation.scaled(amplitude / sup));
    (u0, u_star)
}

fn verify_identities(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let setup = pde_setup(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // partial-fraction identity on random well-separated tuples, scaled by
    // the largest single product so cancellation is measured relatively
    let mut reciprocal_max = 0.0_f64;
    for _ in 0..1000 {
        let len = rng.gen_range(2..=8);
        let mut values: Vec<f64> = Vec::with_capacity(len);
        while values.len() < len {
            let v = rng.gen_range(0.1..10.0);
            if values.iter().all(|&u| (u - v).abs() > 1e-3) {
                values.push(v);
            }
        }
        let sum = reciprocal_product_identity(&values)
            .expect("tuples are distinct by construction");
        let scale = (0..len)
            .map(|i| {
                (0..len)
                    .filter(|&j| j != i)
                    .map(|j| (values[i] - values[j]).abs().recip())
                    .product::<f64>()
            })
            .fold(0.0_f64, f64::max);
        reciprocal_max = reciprocal_max.max(sum.abs() / scale);
    }

    // transform identities on the configured network and on random ones
    let mut column_max = 0.0_f64;
    let mut roundtrip_max = 0.0_f64;
    let mut check = |net: &ReactionNetwork, s: &StationaryState| -> Result<(), CliError> {
        let tf = CascadeTransform::new(net, s)?;
        let (_, col) = tf.residuals(net);
        let p_max = tf.matrix().amax();
        let n = net.species_count();
        let roundtrip = (tf.matrix() * tf.inverse_matrix()
            - nalgebra::DMatrix::identity(n, n))
        .amax();
        column_max = column_max.max(col / p_max);
        roundtrip_max = roundtrip_max.max(roundtrip);
        Ok(())
    };
    check(&setup.net, &setup.s)?;
    let mut sampled = 0;
    while sampled < 200 {
        let n = rng.gen_range(3..=8);
        let m = rng.gen_range(1..=n - 2);
        let mut alpha = vec![0u32; n];
        let mut beta = vec![0u32; n];
        for i in 0..n {
            alpha[i] = rng.gen_range(0..3);
            beta[i] = rng.gen_range(0..3);
            if alpha[i] == beta[i] {
                beta[i] = alpha[i] + 1;
            }
        }
        let d: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 + rng.gen_range(0.0..0.4)).collect();
        let net = match ReactionNetwork::new(m, alpha, beta, d) {
            Ok(net) => net,
            Err(_) => continue,
        };
        let s = StationaryState::new(&net, vec![1.0; n]).expect("all-ones is stationary");
        if CascadeTransform::new(&net, &s).is_err() {
            continue;
        }
        check(&net, &s)?;
        sampled += 1;
    }

    let summary = json!({
        "column_identity_max": column_max,
        "reciprocal_identity_max": reciprocal_max,
        "roundtrip_max": roundtrip_max,
    });
    if let Some(dir) = out_dir(cfg) {
        report::write_json(&dir.join("identities.json"), &summary)?;
    }
    let ok = reciprocal_max <= 1e-9 && column_max <= 1e-10 && roundtrip_max <= 1e-10;
    if !ok {
        return Err(CliError::numerical(
            "identity-residual",
            format!("identity residuals exceed their tolerances: {summary}"),
        ));
    }
    Ok(summary)
}

fn simulate(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let setup = pde_setup(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (u0, u_star) = perturbed_initial(&setup, cfg.perturbation, &mut rng);
    let steps = cfg.steps.unwrap_or(2000);
    let dt = cfg.horizon / steps as f64;
    let bound = 100.0 * (1.0 + u0.sup_physical(&setup.dom));
    let traj = simulate_nonlinear(&setup.dom, &setup.net, &u0, None, (0.0, cfg.horizon), dt, bound)?;

    let final_state = traj.states.last().expect("trajectory is nonempty");
    let deviation = final_state.sub(&u_star).sup_physical(&setup.dom);
    let points = 8 * setup.dom.mode_count();
    let values = final_state.values_on_grid(&setup.dom, points);
    let spatial_std_max = (0..values.nrows())
        .map(|i| {
            let row = values.row(i);
            let mean = row.sum() / points as f64;
            (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / points as f64).sqrt()
        })
        .fold(0.0_f64, f64::max);

    if let Some(dir) = out_dir(cfg) {
        report::write_modal_csv(&dir.join("u_modal.csv"), &traj, 129)?;
        report::write_physical_csv(&dir.join("u_physical.csv"), &traj, &setup.dom, 64, 129)?;
    }
    Ok(json!({
        "final_sup_deviation": deviation,
        "spatial_std_max": spatial_std_max,
        "steps": steps,
    }))
}

fn control_linear(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let setup = pde_setup(cfg)?;
    let sys = setup.transform.linear_cascade();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = random_linv_field(
        setup.net.species_count(),
        setup.dom.max_mode(),
        setup.net.control_count(),
        1.0,
        &mut rng,
    );
    let z0 = raw.scaled(raw.norm_l2().recip());
    let (_, traj, drive) = lr_drive(&setup.dom, sys, &z0, cfg.horizon, &DriveOptions::default())?;
    if let Some(dir) = out_dir(cfg) {
        report::write_json(&dir.join("drive_report.json"), &drive)?;
        report::write_modal_csv(&dir.join("z_modal.csv"), &traj, 129)?;
    }
    Ok(serde_json::to_value(&drive).expect("report serializes"))
}

fn control_nonlinear(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let setup = pde_setup(cfg)?;
    let weights = weight_family(cfg, 0.05)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (u0, _) = perturbed_initial(&setup, cfg.perturbation, &mut rng);
    let fp = FixedPointConfig {
        validation_steps: cfg.steps.unwrap_or(2048),
        steering: SourceTermOptions { target_tol: cfg.target_tol, ..SourceTermOptions::default() },
        ..FixedPointConfig::default()
    };
    let (_, traj, report) =
        fixed_point_control(&u0, &setup.net, &setup.s, &weights, &setup.dom, &setup.transform, &fp)?;
    if let Some(dir) = out_dir(cfg) {
        report::write_json(&dir.join("convergence.json"), &report)?;
        report::write_modal_csv(&dir.join("z_modal.csv"), &traj, 129)?;
    }
    Ok(serde_json::to_value(&report).expect("report serializes"))
}

fn penalized_hum(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let setup = pde_setup(cfg)?;
    let sys = setup.transform.linear_cascade();
    let weights = weight_family(cfg, 0.12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = random_linv_field(
        setup.net.species_count(),
        setup.dom.max_mode(),
        setup.net.control_count(),
        1.0,
        &mut rng,
    );
    let z0 = raw.scaled(raw.norm_l2().recip());
    let eps_list =
        cfg.eps_list.clone().unwrap_or_else(|| vec![1e-2, 1e-4, 1e-6, 1e-8]);
    let time_nodes = cfg.time_nodes.unwrap_or(48);
    let table = epsilon_sweep(&eps_list, &weights, &z0, time_nodes, &setup.dom, sys)?;
    let rows: Vec<Vec<f64>> = table
        .iter()
        .map(|r| {
            vec![
                r.epsilon,
                r.terminal_norm_sq_over_eps,
                r.weighted_control_energy,
                r.control_sup_norm,
            ]
        })
        .collect();
    let summary = json!({ "table": table });
    if let Some(dir) = out_dir(cfg) {
        report::write_table_csv(
            &dir.join("penalty_sweep.csv"),
            "eps,terminal_norm_sq_over_eps,weighted_control_energy,control_sup_norm",
            &rows,
        )?;
        report::write_json(&dir.join("penalty_sweep.json"), &summary)?;
    }
    Ok(summary)
}

fn sweep_cost(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let setup = pde_setup(cfg)?;
    let sys = setup.transform.linear_cascade();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = random_linv_field(
        setup.net.species_count(),
        setup.dom.max_mode(),
        setup.net.control_count(),
        1.0,
        &mut rng,
    );
    let z0 = raw.scaled(raw.norm_l2().recip());
    let horizons = cfg
        .cost_horizons
        .clone()
        .unwrap_or_else(|| vec![0.5, 0.35, 0.25, 0.18, 0.12]);
    let sweep = cost_blowup_sweep(&setup.dom, sys, &z0, &horizons, &DriveOptions::default())?;
    if let Some(dir) = out_dir(cfg) {
        let rows: Vec<Vec<f64>> = sweep.entries.iter().map(|&(t, c)| vec![t, c]).collect();
        report::write_table_csv(&dir.join("cost_sweep.csv"), "T,control_cost", &rows)?;
        report::write_json(&dir.join("cost_sweep.json"), &sweep)?;
    }
    Ok(serde_json::to_value(&sweep).expect("sweep serializes"))
}

fn fdcontrol(cfg: &RunConfig) -> Result<serde_json::Value, CliError> {
    let problem = cfg
        .fdcontrol
        .as_ref()
        .ok_or_else(|| CliError::config("config-invalid", "field `fdcontrol`: required by this subcommand"))?;
    let (sys, y0) = problem.build()?;
    let steering = brunovsky_control(&sys, &y0)?;
    let points = cfg.steps.unwrap_or(256);
    let path = steering.sample(points);
    let terminal_norm = path.states.last().expect("path is nonempty").norm();
    let control_energy = steering.control_energy(points);

    if let Some(dir) = out_dir(cfg) {
        let mut header = String::from("t");
        for i in 1..=problem.n {
            header.push_str(&format!(",y{i}"));
        }
        for i in 1..=problem.m {
            header.push_str(&format!(",h{i}"));
        }
        let rows: Vec<Vec<f64>> = path
            .times
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let mut row = vec![t];
                row.extend(path.states[j].iter().copied());
                row.extend(path.controls[j].iter().copied());
                row
            })
            .collect();
        report::write_table_csv(&dir.join("fd_path.csv"), &header, &rows)?;
        report::write_json(
            &dir.join("fd_report.json"),
            &json!({ "terminal_norm": terminal_norm, "control_energy": control_energy }),
        )?;
    }
    Ok(json!({ "terminal_norm": terminal_norm, "control_energy": control_energy }))
}
