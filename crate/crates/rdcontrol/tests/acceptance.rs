//! Acceptance suite: one numbered end-to-end criterion per pipeline stage,
//! each printing a PASS/FAIL line (run with `--nocapture` to watch them).
//! Criteria carry wall-clock budgets; blowing a budget fails the criterion
//! just like a wrong number does.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdcontrol::cascade::{reciprocal_product_identity, CascadeTransform, LinearCascade};
use rdcontrol::finite_dim::{brunovsky_control, cost_exponent_fit, ModeSteering, ModeSystem};
use rdcontrol::hum::epsilon_sweep;
use rdcontrol::lebeau::{cost_blowup_sweep, lr_drive, DriveOptions};
use rdcontrol::nonlinear::{fixed_point_control, FixedPointConfig, NonlinearError};
use rdcontrol::reaction::{ReactionNetwork, StationaryState};
use rdcontrol::spectral::{
    random_linv_field, simulate_linear, simulate_nonlinear, simulate_nonlinear_z, ControlSignal,
    SpectralDomain, SpectralField,
};
use rdcontrol::weights::{sourceterm_control, SourceTermOptions, WeightFamily};
use std::time::Instant;

struct Criterion {
    idx: usize,
    name: &'static str,
    budget_secs: f64,
    outcome: Result<String, String>,
    secs: f64,
}

fn run(
    idx: usize,
    name: &'static str,
    budget_secs: f64,
    f: impl FnOnce() -> Result<String, String>,
) -> Criterion {
    let start = Instant::now();
    let outcome = f();
    Criterion { idx, name, budget_secs, outcome, secs: start.elapsed().as_secs_f64() }
}

#[test]
fn acceptance_criteria() {
    let mut results = Vec::new();
    results.push(run(1, "partial-fraction and column identities", 5.0, identities));
    results.push(run(2, "cascade equivalence under control", 30.0, cascade_equivalence));
    results.push(run(4, "mode steering against an ODE oracle", 60.0, brunovsky_oracle));
    results.push(run(5, "linear null-control with a single control", 60.0, single_control_drive));
    results.push(run(6, "control cost blow-up as the horizon shrinks", 300.0, cost_blowup));
    results.push(run(7, "source-term steering with weighted certificates", 120.0, sourceterm));
    results.push(run(8, "penalized sweep stays bounded and optimal", 180.0, penalized_sweep));

    // the controlled nonlinear run is shared: criterion 9 grades the
    // controller, criterion 3 grades the conserved functionals along it
    let start = Instant::now();
    let nonlinear = nonlinear_case();
    let nonlinear_secs = start.elapsed().as_secs_f64();
    let drift = nonlinear.as_ref().ok().map(|(drift, _)| *drift);
    results.push(Criterion {
        idx: 9,
        name: "nonlinear steering with mass gate",
        budget_secs: 300.0,
        outcome: nonlinear.map(|(_, detail)| detail),
        secs: nonlinear_secs,
    });
    results.push(run(3, "conserved functionals along the controlled run", 300.0, || {
        match drift {
            Some(d) if d <= 1e-8 => Ok(format!("relative drift {d:.1e}")),
            Some(d) => Err(format!("relative drift {d:.2e} above 1e-8")),
            None => Err("the controlled nonlinear run itself failed".into()),
        }
    }));

    results.push(run(10, "uncontrolled zero-modes frozen to the bit", 10.0, zero_mode_frozen));
    results.push(run(11, "free dynamics settle to spatial constancy", 60.0, spatial_constancy));

    results.sort_by_key(|c| c.idx);
    let mut failures = 0;
    for c in &results {
        match &c.outcome {
            Ok(detail) if c.secs <= c.budget_secs => {
                println!("PASS [{:2}] {} — {} ({:.1} s)", c.idx, c.name, detail, c.secs);
            }
            Ok(detail) => {
                failures += 1;
                println!(
                    "FAIL [{:2}] {} — over budget: {:.1} s > {:.0} s ({})",
                    c.idx, c.name, c.secs, c.budget_secs, detail
                );
            }
            Err(why) => {
                failures += 1;
                println!("FAIL [{:2}] {} — {} ({:.1} s)", c.idx, c.name, why, c.secs);
            }
        }
    }
    assert_eq!(failures, 0, "{failures} acceptance criteria failed");
}

fn demo_network() -> (ReactionNetwork, StationaryState) {
    let net = ReactionNetwork::demo_quartet();
    let s = StationaryState::new(&net, vec![1.0; 4]).expect("all-ones is stationary");
    (net, s)
}

fn demo_system(max_mode: usize) -> Result<(SpectralDomain, LinearCascade), String> {
    let dom = SpectralDomain::new(1.0, max_mode, (0.3, 0.7), 3 * max_mode + 4)
        .map_err(|e| e.to_string())?;
    let (net, s) = demo_network();
    let sys = CascadeTransform::new(&net, &s)
        .map_err(|e| e.to_string())?
        .linear_cascade()
        .clone();
    Ok((dom, sys))
}

/// Piecewise-linear control with random mode-damped node values.
fn random_control(
    m: usize,
    max_mode: usize,
    horizon: f64,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> ControlSignal {
    let nodes = 11;
    let times: Vec<f64> =
        (0..nodes).map(|j| horizon * j as f64 / (nodes - 1) as f64).collect();
    let values = times
        .iter()
        .map(|_| {
            DMatrix::from_fn(m, max_mode + 1, |_, k| {
                amplitude * (1.0 + k as f64).powi(-2) * rng.gen_range(-1.0..1.0)
            })
        })
        .collect();
    ControlSignal::new(times, values)
}

/// 1. Partial-fraction identity on random tuples and the column identity on
///    random networks, both measured relative to their natural scales.
fn identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut reciprocal_max = 0.0_f64;
    for _ in 0..1000 {
        let len = rng.gen_range(2..=8usize);
        let mut values: Vec<f64> = Vec::with_capacity(len);
        while values.len() < len {
            let v = rng.gen_range(0.1..10.0);
            if values.iter().all(|&u| (u - v).abs() > 1e-3) {
                values.push(v);
            }
        }
        let sum = reciprocal_product_identity(&values).map_err(|e| e.to_string())?;
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
    if reciprocal_max > 1e-9 {
        return Err(format!("partial-fraction residual {reciprocal_max:.2e} above 1e-9"));
    }

    let mut column_max = 0.0_f64;
    let mut sampled = 0;
    while sampled < 200 {
        let n = rng.gen_range(3..=8usize);
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
        let d: Vec<f64> =
            (0..n).map(|i| 0.5 + i as f64 + rng.gen_range(0.0..0.4)).collect();
        let Ok(net) = ReactionNetwork::new(m, alpha, beta, d) else { continue };
        let s = StationaryState::new(&net, vec![1.0; n]).expect("all-ones is stationary");
        let Ok(tf) = CascadeTransform::new(&net, &s) else { continue };
        let (_, col) = tf.residuals(&net);
        column_max = column_max.max(col / tf.matrix().amax());
        sampled += 1;
    }
    if column_max > 1e-10 {
        return Err(format!("column identity residual {column_max:.2e} above 1e-10"));
    }
    Ok(format!("reciprocal {reciprocal_max:.1e}, column {column_max:.1e} over 1000 + 200 draws"))
}

/// 2. The controlled nonlinear flow simulated in physical variables and in
///    cascade variables must agree through the change of variables at T.
fn cascade_equivalence() -> Result<String, String> {
    let dom = SpectralDomain::new(1.0, 31, (0.3, 0.7), 97).map_err(|e| e.to_string())?;
    let (net, s) = demo_network();
    let tf = CascadeTransform::new(&net, &s).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let dir = random_linv_field(4, 31, 2, 1.0, &mut rng);
    let u0 = tf.from_z(&dir.scaled(5e-3 / dir.sup_physical(&dom)), &dom);
    let control = random_control(2, 31, 0.5, 0.4, &mut rng);
    let span = (0.0, 0.5);
    let traj_u = simulate_nonlinear(&dom, &net, &u0, Some(&control), span, 1e-4, 50.0)
        .map_err(|e| e.to_string())?;
    let z0 = tf.to_z(&u0, &dom);
    let traj_z =
        simulate_nonlinear_z(&dom, &tf, &net, &s, &z0, Some(&control), span, 1e-4, 50.0)
            .map_err(|e| e.to_string())?;
    let direct = traj_z.final_state();
    let mapped = tf.to_z(traj_u.final_state(), &dom);
    let gap = direct.sub(&mapped).sup_physical(&dom);
    let scale = direct.sup_physical(&dom).max(z0.sup_physical(&dom));
    let rel = gap / scale;
    if rel > 1e-6 {
        return Err(format!("the two formulations disagree by {rel:.2e} (relative) at T"));
    }
    Ok(format!("relative gap {rel:.1e} at T = 0.5, dt = 1e-4, 32 modes"))
}

/// Cascade with the standard block structure for a given shape: distinct
/// diffusivities, unit sub-diagonal couplers below the pivot row.
fn chain_cascade(n: usize, m: usize, d: &[f64]) -> LinearCascade {
    let mut diffusion = DMatrix::zeros(n, n);
    for i in 0..n {
        diffusion[(i, i)] = d[i];
    }
    for i in m + 1..n {
        diffusion[(i, i - 1)] = 1.0;
    }
    let mut coupling = DMatrix::zeros(n, n);
    for i in 0..m {
        for j in 0..n {
            coupling[(i, j)] = 0.25 / (1 + i + j) as f64;
        }
    }
    coupling[(m, m - 1)] = 1.5;
    coupling[(m, m)] = -0.4;
    LinearCascade::new(diffusion, coupling, m).expect("rows below the pivot are zero")
}

/// Classical RK4 on `y' = A y + B h` with the steering control tabulated on
/// the half grid; returns the terminal norm.
fn rk4_terminal(
    a: &DMatrix<f64>,
    m: usize,
    steering: &ModeSteering,
    tau: f64,
    y0: &DVector<f64>,
) -> f64 {
    let anorm = (0..a.nrows())
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let steps = ((800.0 * tau * anorm).ceil() as usize).max(40_000);
    let h = tau / steps as f64;
    let mut half = DMatrix::zeros(m, 2 * steps + 1);
    for j in 0..=2 * steps {
        let u = steering.control_at((h * j as f64 / 2.0).min(tau));
        for i in 0..m {
            half[(i, j)] = u[i];
        }
    }
    let mut y = y0.clone();
    for j in 0..steps {
        let f = |yy: &DVector<f64>, stage: usize| {
            let mut dy = a * yy;
            for i in 0..m {
                dy[i] += half[(i, 2 * j + stage)];
            }
            dy
        };
        let k1 = f(&y, 0);
        let k2 = f(&(&y + &k1 * (h / 2.0)), 1);
        let k3 = f(&(&y + &k2 * (h / 2.0)), 1);
        let k4 = f(&(&y + &k3 * h), 2);
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    y.norm()
}

/// 4. The explicit mode steering must land on zero under an integrator that
///    shares nothing with the construction, across shapes, eigenvalues, and
///    horizons; the fitted cost exponents must respect the structural bound.
fn brunovsky_oracle() -> Result<String, String> {
    let shapes: Vec<(&str, LinearCascade)> = vec![
        ("2/1", chain_cascade(2, 1, &[1.0, 2.3])),
        ("3/1", chain_cascade(3, 1, &[1.0, 2.3, 3.7])),
        ("4/2", demo_system(1)?.1),
    ];
    let y0_full = [1.0, -0.6, 0.4, -0.3];
    let mut worst = 0.0_f64;
    let mut worst_case = String::new();
    for (label, cascade) in &shapes {
        let y0 = DVector::from_row_slice(&y0_full[..cascade.species_count()]);
        for &lambda in &[1.0, 10.0, 100.0] {
            for &tau in &[0.1, 0.5, 1.0] {
                let sys = ModeSystem::from_cascade(cascade, lambda, tau)
                    .map_err(|e| e.to_string())?;
                let steering = brunovsky_control(&sys, &y0)
                    .map_err(|e| format!("{label}, lambda {lambda}, tau {tau}: {e}"))?;
                let rel =
                    rk4_terminal(sys.matrix(), cascade.control_count(), &steering, tau, &y0)
                        / y0.norm();
                if rel > worst {
                    worst = rel;
                    worst_case = format!("{label}, lambda {lambda}, tau {tau}");
                }
            }
        }
    }
    if worst > 1e-10 {
        return Err(format!("oracle terminal {worst:.2e} above 1e-10 ({worst_case})"));
    }

    // the exponents are graded on all-ones data: mixed-sign data cancels at
    // large tau and steepens the finite-window slope past the asymptote
    let taus = [0.3, 0.22, 0.16, 0.12, 0.08, 0.06];
    let lambdas = [6.0, 9.0, 14.0, 20.0, 30.0, 45.0];
    let mut slopes = Vec::new();
    for (label, cascade) in &shapes {
        let y0 = DVector::from_element(cascade.species_count(), 1.0);
        let fit = cost_exponent_fit(cascade, &y0, &taus, 0.5, &lambdas, 0.5)
            .map_err(|e| e.to_string())?;
        let cap = fit.bound + 0.5;
        if fit.tau_slope > cap || fit.lambda_slope > cap {
            return Err(format!(
                "{label}: fitted exponents ({:.2}, {:.2}) exceed {cap:.1}",
                fit.tau_slope, fit.lambda_slope
            ));
        }
        slopes.push(format!("{label}: ({:.2}, {:.2}) <= {cap:.1}", fit.tau_slope, fit.lambda_slope));
    }
    Ok(format!("worst terminal {worst:.1e} ({worst_case}); exponents {}", slopes.join(", ")))
}

/// 5. Four species, one control: a random admissible state is driven to
///    numerical zero through the full frequency-splitting schedule.
fn single_control_drive() -> Result<String, String> {
    let net = ReactionNetwork::new(1, vec![1, 0, 1, 0], vec![0, 1, 0, 1], vec![1.0, 2.0, 3.0, 4.0])
        .map_err(|e| e.to_string())?;
    let s = StationaryState::new(&net, vec![1.0; 4]).map_err(|e| e.to_string())?;
    let sys = CascadeTransform::new(&net, &s).map_err(|e| e.to_string())?.linear_cascade().clone();
    let dom = SpectralDomain::new(1.0, 31, (0.3, 0.7), 97).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let raw = random_linv_field(4, 31, 1, 1.0, &mut rng);
    let z0 = raw.scaled(raw.norm_l2().recip());
    let (_, _, report) =
        lr_drive(&dom, &sys, &z0, 0.5, &DriveOptions::default()).map_err(|e| e.to_string())?;
    let rel = report.final_norm / report.initial_norm;
    if rel > 1e-6 {
        return Err(format!("terminal norm ratio {rel:.2e} above 1e-6"));
    }
    Ok(format!(
        "terminal ratio {rel:.1e} over {} stages, M = {:.2}",
        report.stages.len(),
        report.spectral_constant_used
    ))
}

/// 6. Shrinking the horizon makes the drive strictly more expensive, and the
///    cost follows c1 * exp(c2 / T).
fn cost_blowup() -> Result<String, String> {
    let (dom, sys) = demo_system(8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let raw = random_linv_field(4, 8, 2, 1.0, &mut rng);
    let z0 = raw.scaled(raw.norm_l2().recip());
    let horizons = [0.5, 0.35, 0.25, 0.18, 0.12];
    let sweep = cost_blowup_sweep(&dom, &sys, &z0, &horizons, &DriveOptions::default())
        .map_err(|e| e.to_string())?;
    for w in sweep.entries.windows(2) {
        if w[1].1 <= w[0].1 {
            return Err(format!(
                "cost fails to grow: {:.3e} at T = {} vs {:.3e} at T = {}",
                w[0].1, w[0].0, w[1].1, w[1].0
            ));
        }
    }
    if sweep.r_squared < 0.95 {
        return Err(format!("exponential fit R^2 = {:.3} below 0.95", sweep.r_squared));
    }
    Ok(format!(
        "cost {:.2e} -> {:.2e} over T = 0.5 -> 0.12, fit R^2 = {:.3}",
        sweep.entries[0].1,
        sweep.entries.last().unwrap().1,
        sweep.r_squared
    ))
}

/// 7. A source in the admissible weighted class is absorbed: the endpoint
///    meets the derived tolerance and the weighted sup certificates close.
fn sourceterm() -> Result<String, String> {
    let (dom, sys) = demo_system(8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let z0 = random_linv_field(4, 8, 2, 1.0, &mut rng);
    let weights = WeightFamily::with_default_exponents(0.8, 1.0).map_err(|e| e.to_string())?;
    let raw = random_linv_field(4, 8, 2, 1.0, &mut rng);
    let profile: DMatrix<f64> = raw.coeffs() * (z0.norm_l2() / raw.coeffs().norm());
    let src = |t: f64| &profile * weights.rho_s(t);
    let (_, _, report) =
        sourceterm_control(&dom, &sys, &z0, Some(&src), &weights, &SourceTermOptions::default())
            .map_err(|e| e.to_string())?;
    let bound = 1e-6 * (z0.norm_l2() + profile.norm());
    if report.final_norm > bound {
        return Err(format!("final norm {:.2e} above {bound:.2e}", report.final_norm));
    }
    let certs = &report.certificates;
    if !(certs.sup_z_over_rho0.is_finite() && certs.sup_h_over_rho0.is_finite()) {
        return Err(format!(
            "weighted certificates not finite: state {:.2e}, control {:.2e}",
            certs.sup_z_over_rho0, certs.sup_h_over_rho0
        ));
    }
    Ok(format!(
        "final {:.1e} <= {bound:.1e}; sup|Z/rho0| = {:.2e}, sup|H/rho0| = {:.2e}",
        report.final_norm, certs.sup_z_over_rho0, certs.sup_h_over_rho0
    ))
}

/// 8. Across a four-decade penalty sweep the optimality system is solved to
///    tolerance and the reported quantities stay bounded.
fn penalized_sweep() -> Result<String, String> {
    let (dom, sys) = demo_system(8)?;
    let weights = WeightFamily::with_default_exponents(0.12, 0.5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let raw = random_linv_field(4, 8, 2, 1.0, &mut rng);
    let z0 = raw.scaled(raw.norm_l2().recip());
    let eps = [1e-2, 1e-4, 1e-6, 1e-8];
    let reports =
        epsilon_sweep(&eps, &weights, &z0, 48, &dom, &sys).map_err(|e| e.to_string())?;
    let worst_residual = reports.iter().map(|r| r.cg_residual).fold(0.0_f64, f64::max);
    if worst_residual > 1e-6 {
        return Err(format!("optimality residual {worst_residual:.2e} above 1e-6"));
    }
    let bounded = |label: &str, values: Vec<f64>| -> Result<(), String> {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let median = 0.5 * (sorted[(sorted.len() - 1) / 2] + sorted[sorted.len() / 2]);
        let last = *values.last().unwrap();
        if last > 2.0 * median {
            return Err(format!(
                "{label} grows through the sweep: last {last:.3e} vs median {median:.3e}"
            ));
        }
        Ok(())
    };
    bounded("terminal^2/eps", reports.iter().map(|r| r.terminal_norm_sq_over_eps).collect())?;
    bounded("weighted energy", reports.iter().map(|r| r.weighted_control_energy).collect())?;
    bounded("control sup", reports.iter().map(|r| r.control_sup_norm).collect())?;
    Ok(format!(
        "residual {worst_residual:.1e}; terminal^2/eps {:.2e} -> {:.2e}; control sup {:.0} -> {:.0}",
        reports[0].terminal_norm_sq_over_eps,
        reports.last().unwrap().terminal_norm_sq_over_eps,
        reports[0].control_sup_norm,
        reports.last().unwrap().control_sup_norm
    ))
}

/// 9 (and the data for 3). A one-percent perturbation of the steady state is
///    steered home by the fixed-point controller; incompatible data is
///    refused with the typed mass error. Returns the invariant drift along
///    the validated run together with the criterion-9 detail line.
fn nonlinear_case() -> Result<(f64, String), String> {
    let dom = SpectralDomain::new(1.0, 6, (0.3, 0.7), 22).map_err(|e| e.to_string())?;
    let (net, s) = demo_network();
    let tf = CascadeTransform::new(&net, &s).map_err(|e| e.to_string())?;
    let weights = WeightFamily::with_default_exponents(0.05, 1.0).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dir = random_linv_field(4, 6, 2, 1.0, &mut rng);
    let u0 = tf.from_z(&dir.scaled(1e-2 / dir.sup_physical(&dom)), &dom);
    let cfg = FixedPointConfig::default();
    let (_, _, report) =
        fixed_point_control(&u0, &net, &s, &weights, &dom, &tf, &cfg).map_err(|e| e.to_string())?;
    if report.iterations.len() > 20 {
        return Err(format!("{} fixed-point iterations exceed 20", report.iterations.len()));
    }
    if report.terminal_error > 1e-5 {
        return Err(format!(
            "validated terminal deviation {:.2e} above 1e-5",
            report.terminal_error
        ));
    }

    let mut bad = SpectralField::constant(s.concentrations(), 6, dom.length());
    bad.coeffs_mut()[(3, 0)] += 1e-3;
    match fixed_point_control(&bad, &net, &s, &weights, &dom, &tf, &cfg) {
        Err(NonlinearError::MassConditionViolated { .. }) => {}
        Err(other) => return Err(format!("wrong rejection for incompatible data: {other}")),
        Ok(_) => return Err("incompatible initial data was accepted".into()),
    }

    Ok((
        report.invariant_drift,
        format!(
            "{} iterations, validated terminal {:.1e}, incompatible data refused",
            report.iterations.len(),
            report.terminal_error
        ),
    ))
}

/// 10. With the control acting on the top block only, the zero-mode
///     coefficients of the decoupled species cannot move at all — their
///     start and end values must be bit-identical.
fn zero_mode_frozen() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let nets = vec![
        ReactionNetwork::demo_quartet(),
        ReactionNetwork::new(1, vec![1, 0, 1, 0], vec![0, 1, 0, 1], vec![1.0, 2.0, 3.0, 4.0])
            .map_err(|e| e.to_string())?,
    ];
    for net in nets {
        let m = net.control_count();
        let s = StationaryState::new(&net, vec![1.0; 4]).map_err(|e| e.to_string())?;
        let sys = CascadeTransform::new(&net, &s)
            .map_err(|e| e.to_string())?
            .linear_cascade()
            .clone();
        let dom = SpectralDomain::new(1.0, 8, (0.3, 0.7), 28).map_err(|e| e.to_string())?;
        let z0 = SpectralField::from_coeffs(DMatrix::from_fn(4, 9, |_, k| {
            (1.0 + k as f64).recip() * rng.gen_range(-1.0..1.0)
        }));
        let control = random_control(m, 8, 0.5, 1.0, &mut rng);
        let traj = simulate_linear(&dom, &sys, &z0, Some(&control), None, (0.0, 0.5), 1e-3)
            .map_err(|e| e.to_string())?;
        let last = traj.final_state();
        for i in m + 1..4 {
            let before = z0.coeffs()[(i, 0)];
            let after = last.coeffs()[(i, 0)];
            if before.to_bits() != after.to_bits() {
                return Err(format!(
                    "coordinate {} zero-mode moved under control (m = {m}): {before:.17e} -> {after:.17e}",
                    i + 1
                ));
            }
        }
    }
    Ok("start and end bits identical for every decoupled zero-mode (m = 2 and m = 1)".into())
}

/// 11. Left alone, random nonnegative data relaxes to a spatially constant
///     profile.
fn spatial_constancy() -> Result<String, String> {
    let dom = SpectralDomain::new(1.0, 16, (0.3, 0.7), 52).map_err(|e| e.to_string())?;
    let (net, _) = demo_network();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut u0 = SpectralField::from_coeffs(DMatrix::from_fn(4, 17, |_, k| {
        if k == 0 {
            0.0
        } else {
            0.5 * (1.0 + k as f64).powi(-2) * rng.gen_range(-1.0..1.0)
        }
    }));
    for i in 0..4 {
        u0.coeffs_mut()[(i, 0)] = rng.gen_range(0.8..1.2);
    }
    let initial = u0.values_on_grid(&dom, 257);
    let min = initial.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        return Err(format!("constructed initial data dips negative ({min:.3})"));
    }
    let traj = simulate_nonlinear(&dom, &net, &u0, None, (0.0, 20.0), 0.01, 100.0)
        .map_err(|e| e.to_string())?;
    let grid = traj.final_state().values_on_grid(&dom, 257);
    let mut worst = 0.0_f64;
    for i in 0..4 {
        let row = grid.row(i);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
        worst = worst.max(var.sqrt());
    }
    if worst > 1e-6 {
        return Err(format!("spatial deviation {worst:.2e} above 1e-6 at t = 20"));
    }
    Ok(format!("largest spatial standard deviation {worst:.1e} at t = 20"))
}
