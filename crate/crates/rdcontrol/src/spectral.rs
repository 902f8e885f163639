//! Spectral Galerkin discretization on the interval (0, L) with Neumann
//! boundary conditions.
//!
//! Basis: `e_0 = 1/sqrt(L)`, `e_k = sqrt(2/L) cos(k pi x / L)` with
//! `-e_k'' = lambda_k e_k`, `lambda_k = (k pi / L)^2`. States are
//! species-by-mode coefficient arrays; multiplication by the indicator of the
//! control region enters through its Gram matrix `W`, which keeps the modal
//! model exactly linear in the control.
//!
//! Integrators:
//! * [`simulate_linear`] — per-mode exact matrix exponentials, polynomial
//!   (up to cubic) input quadrature per step, so piecewise-linear controls are
//!   integrated exactly and smooth sources at 4th order.
//! * [`simulate_adjoint`] — the backward transposed flow, input-free, exact.
//! * [`simulate_nonlinear`] / [`simulate_nonlinear_z`] — IMEX: exact linear
//!   propagator, dealiased pseudo-spectral nonlinearity, ETD2RK in time.

use crate::cascade::LinearCascade;
use crate::linalg::{cubic_through_thirds, phi_stack, step_polynomial_input};
use crate::reaction::{reaction_rate, ReactionNetwork, StationaryState};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("interval length must be positive, got {0}")]
    BadLength(f64),
    #[error("need at least one mode")]
    NoModes,
    #[error("control region must satisfy 0 <= a < b <= L, got [{0}, {1}]")]
    BadOmega(f64, f64),
    #[error("quadrature needs more points than modes: quad_points {quad} <= N {modes}")]
    QuadratureTooCoarse { quad: usize, modes: usize },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("shape mismatch: {what} has {got} {axis}, expected {expected}")]
    ShapeMismatch { what: &'static str, axis: &'static str, got: usize, expected: usize },
    #[error("state became non-finite at t = {t}")]
    NonfiniteState { t: f64 },
    #[error("collocation sup-norm {sup:.3e} exceeded the blow-up bound {bound:.1e} at t = {t}")]
    BlowupDetected { t: f64, sup: f64, bound: f64 },
    #[error("time step and horizon must be positive and finite (dt = {dt}, span = {span})")]
    BadTimeGrid { dt: f64, span: f64 },
}

/// The interval, retained mode range, control region and quadrature size.
#[derive(Debug, Clone)]
pub struct SpectralDomain {
    length: f64,
    modes: usize,
    omega: (f64, f64),
    quad_points: usize,
}

impl SpectralDomain {
    pub fn new(
        length: f64,
        modes: usize,
        omega: (f64, f64),
        quad_points: usize,
    ) -> Result<Self, DomainError> {
        if !(length.is_finite() && length > 0.0) {
            return Err(DomainError::BadLength(length));
        }
        if modes == 0 {
            return Err(DomainError::NoModes);
        }
        if !(0.0 <= omega.0 && omega.0 < omega.1 && omega.1 <= length) {
            return Err(DomainError::BadOmega(omega.0, omega.1));
        }
        if quad_points <= modes {
            return Err(DomainError::QuadratureTooCoarse { quad: quad_points, modes });
        }
        Ok(Self { length, modes, omega, quad_points })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Highest retained mode N (fields carry N+1 coefficients).
    pub fn max_mode(&self) -> usize {
        self.modes
    }

    pub fn mode_count(&self) -> usize {
        self.modes + 1
    }

    pub fn omega(&self) -> (f64, f64) {
        self.omega
    }

    pub fn quad_points(&self) -> usize {
        self.quad_points
    }

    pub fn eigenvalue(&self, k: usize) -> f64 {
        let w = k as f64 * std::f64::consts::PI / self.length;
        w * w
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        (0..=self.modes).map(|k| self.eigenvalue(k)).collect()
    }

    pub fn basis_eval(&self, k: usize, x: f64) -> f64 {
        if k == 0 {
            1.0 / self.length.sqrt()
        } else {
            (2.0 / self.length).sqrt() * (k as f64 * std::f64::consts::PI * x / self.length).cos()
        }
    }

    /// Midpoint collocation grid of `points` nodes; the associated uniform
    /// quadrature integrates products `e_j e_k` exactly for `j + k < 2 points`.
    pub fn collocation_points(&self, points: usize) -> Vec<f64> {
        (0..points).map(|j| (j as f64 + 0.5) * self.length / points as f64).collect()
    }

    /// Synthesis matrix `S[j][k] = e_k(x_j)` on a `points`-node midpoint grid.
    pub fn synthesis_matrix(&self, points: usize) -> DMatrix<f64> {
        let xs = self.collocation_points(points);
        DMatrix::from_fn(points, self.modes + 1, |j, k| self.basis_eval(k, xs[j]))
    }

    /// Collocation grid size that dealiases degree-`degree` polynomials.
    pub fn dealias_points(&self, degree: u32) -> usize {
        let needed = ((degree as usize + 1) * self.modes) / 2 + 1;
        needed.max(self.quad_points)
    }

    /// Gram matrix of the basis restricted to omega, in closed form:
    /// `W[j][k] = int_a^b e_j e_k dx`.
    pub fn localization_matrix(&self) -> DMatrix<f64> {
        let (a, b) = self.omega;
        let l = self.length;
        let cosint = |r: usize| -> f64 {
            if r == 0 {
                b - a
            } else {
                let w = r as f64 * std::f64::consts::PI / l;
                ((w * b).sin() - (w * a).sin()) / w
            }
        };
        DMatrix::from_fn(self.modes + 1, self.modes + 1, |j, k| {
            if j == 0 && k == 0 {
                (b - a) / l
            } else if j == 0 || k == 0 {
                let r = j.max(k);
                std::f64::consts::SQRT_2 / l * cosint(r)
            } else {
                (cosint(j.abs_diff(k)) + cosint(j + k)) / l
            }
        })
    }
}

/// Species-by-mode coefficient array; the discrete state.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    coeffs: DMatrix<f64>,
}

impl SpectralField {
    pub fn zeros(species: usize, max_mode: usize) -> Self {
        Self { coeffs: DMatrix::zeros(species, max_mode + 1) }
    }

    pub fn from_coeffs(coeffs: DMatrix<f64>) -> Self {
        Self { coeffs }
    }

    /// Constant-in-space field with the given per-species values.
    pub fn constant(values: &[f64], max_mode: usize, length: f64) -> Self {
        let mut f = Self::zeros(values.len(), max_mode);
        for (i, &v) in values.iter().enumerate() {
            f.coeffs[(i, 0)] = v * length.sqrt();
        }
        f
    }

    pub fn coeffs(&self) -> &DMatrix<f64> {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.coeffs
    }

    pub fn species_count(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn max_mode(&self) -> usize {
        self.coeffs.ncols() - 1
    }

    /// L2(0,L)^n norm; equals the Euclidean coefficient norm by Parseval.
    pub fn norm_l2(&self) -> f64 {
        self.coeffs.norm()
    }

    /// Collocation sup-norm over the domain's quadrature grid.
    pub fn sup_norm(&self, dom: &SpectralDomain) -> f64 {
        let synth = dom.synthesis_matrix(dom.quad_points());
        (&self.coeffs * synth.transpose()).amax()
    }

    /// Physical values on a given midpoint grid (species x points).
    pub fn values_on_grid(&self, dom: &SpectralDomain, points: usize) -> DMatrix<f64> {
        &self.coeffs * dom.synthesis_matrix(points).transpose()
    }

    /// Largest |mode-0 coefficient| over uncontrolled species `m+1..n`
    /// (0-based `m+1..`): the defect from the controllable class L_inv.
    pub fn linv_defect(&self, m: usize) -> f64 {
        (m + 1..self.species_count()).map(|i| self.coeffs[(i, 0)].abs()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { coeffs: &self.coeffs * factor }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self { coeffs: &self.coeffs + &other.coeffs }
    }

    /// Sup norm over species on a fine midpoint grid (8 points per mode).
    pub fn sup_physical(&self, dom: &SpectralDomain) -> f64 {
        let points = 8 * dom.mode_count();
        let vals = &self.coeffs * dom.synthesis_matrix(points).transpose();
        vals.amax()
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self { coeffs: &self.coeffs - &other.coeffs }
    }
}

/// Split into modes with `lambda_k <= lambda_cut` and the complement; the
/// parts sum to the input exactly.
pub fn project_low_modes(
    z: &SpectralField,
    lambda_cut: f64,
    dom: &SpectralDomain,
) -> (SpectralField, SpectralField) {
    let mut low = z.clone();
    let mut high = z.clone();
    for k in 0..=z.max_mode() {
        if dom.eigenvalue(k) <= lambda_cut {
            high.coeffs_mut().column_mut(k).fill(0.0);
        } else {
            low.coeffs_mut().column_mut(k).fill(0.0);
        }
    }
    (low, high)
}

/// Smooth random field with unit-free amplitude: mode k is damped by
/// (1+k)^{-2}; uncontrolled species get zero mean (the L_inv class).
pub fn random_linv_field<R: Rng>(
    species: usize,
    max_mode: usize,
    m: usize,
    amplitude: f64,
    rng: &mut R,
) -> SpectralField {
    let mut f = SpectralField::zeros(species, max_mode);
    for i in 0..species {
        for k in 0..=max_mode {
            if k == 0 && i > m {
                continue;
            }
            let damp = (1.0 + k as f64).powi(-2);
            f.coeffs_mut()[(i, k)] = amplitude * damp * rng.gen_range(-1.0..1.0);
        }
    }
    f
}

/// Piecewise-linear-in-time modal control values for the m controlled
/// species, *before* localization: the applied physical control is
/// `1_omega(x) * sum_k values[i][k] e_k(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    times: Vec<f64>,
    values: Vec<DMatrix<f64>>,
}

impl ControlSignal {
    pub fn new(times: Vec<f64>, values: Vec<DMatrix<f64>>) -> Self {
        assert_eq!(times.len(), values.len(), "one value array per time node");
        assert!(times.windows(2).all(|w| w[0] < w[1]), "times must strictly increase");
        Self { times, values }
    }

    pub fn zero(m: usize, max_mode: usize, t0: f64, t1: f64) -> Self {
        Self {
            times: vec![t0, t1],
            values: vec![DMatrix::zeros(m, max_mode + 1); 2],
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[DMatrix<f64>] {
        &self.values
    }

    pub fn controlled_species(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn max_mode(&self) -> usize {
        self.values[0].ncols() - 1
    }

    /// Linear interpolation; identically zero outside the time grid.
    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        let (rows, cols) = (self.values[0].nrows(), self.values[0].ncols());
        if t < self.times[0] || t > *self.times.last().unwrap() {
            return DMatrix::zeros(rows, cols);
        }
        match self.times.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
            Ok(i) => self.values[i].clone(),
            Err(i) => {
                let (t0, t1) = (self.times[i - 1], self.times[i]);
                let w = (t - t0) / (t1 - t0);
                &self.values[i - 1] * (1.0 - w) + &self.values[i] * w
            }
        }
    }

    /// Concatenate disjoint windows into one signal covering [t0, t1] with
    /// zeros in the gaps. Windows must be sorted and non-overlapping with
    /// zero-valued end nodes.
    pub fn assemble(windows: &[ControlSignal], m: usize, max_mode: usize, t0: f64, t1: f64) -> Self {
        let zero = DMatrix::zeros(m, max_mode + 1);
        let mut times = Vec::new();
        let mut values = Vec::new();
        if windows.first().map_or(true, |w| w.times[0] > t0) {
            times.push(t0);
            values.push(zero.clone());
        }
        for w in windows {
            for (t, v) in w.times.iter().zip(&w.values) {
                if times.last().map_or(true, |last| t > last) {
                    times.push(*t);
                    values.push(v.clone());
                }
            }
        }
        if times.last().map_or(true, |last| *last < t1) {
            times.push(t1);
            values.push(zero);
        }
        Self::new(times, values)
    }

    /// L2 norm of the localized control over space-time,
    /// `sqrt(int sum_i v_i(t)^T W v_i(t) dt)`, exact per linear segment.
    pub fn l2_cost(&self, w_loc: &DMatrix<f64>) -> f64 {
        let quad = |v: &DMatrix<f64>, u: &DMatrix<f64>| -> f64 {
            // sum over species rows of v_i^T W u_i
            let vw = v * w_loc;
            vw.zip_fold(u, 0.0, |acc, a, b| acc + a * b)
        };
        let mut total = 0.0;
        for i in 1..self.times.len() {
            let dt = self.times[i] - self.times[i - 1];
            let (v0, v1) = (&self.values[i - 1], &self.values[i]);
            // integrand is quadratic in t: Simpson is exact
            let mid = (v0 + v1) * 0.5;
            total += dt / 6.0 * (quad(v0, v0) + 4.0 * quad(&mid, &mid) + quad(v1, v1));
        }
        total.sqrt()
    }

    /// Sup over time nodes of the L2 coefficient norm.
    pub fn sup_node_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// The same signal translated in time.
    pub fn shifted(&self, offset: f64) -> Self {
        Self {
            times: self.times.iter().map(|t| t + offset).collect(),
            values: self.values.clone(),
        }
    }

    /// Sup of the applied (localized) control over time nodes and the
    /// collocation points inside omega.
    pub fn sup_physical(&self, dom: &SpectralDomain) -> f64 {
        let synth = dom.synthesis_matrix(dom.quad_points());
        let xs = dom.collocation_points(dom.quad_points());
        let (a, b) = dom.omega();
        let mut sup: f64 = 0.0;
        for v in &self.values {
            let vals = v * synth.transpose();
            for (j, &x) in xs.iter().enumerate() {
                if x >= a && x <= b {
                    for i in 0..vals.nrows() {
                        sup = sup.max(vals[(i, j)].abs());
                    }
                }
            }
        }
        sup
    }
}

/// Time-sampled states, including both endpoints.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
}

impl Trajectory {
    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn initial_state(&self) -> &SpectralField {
        self.states.first().expect("non-empty trajectory")
    }

    /// Linear interpolation in time between stored slices.
    pub fn interpolate(&self, t: f64) -> SpectralField {
        if t <= self.times[0] {
            return self.states[0].clone();
        }
        if t >= *self.times.last().unwrap() {
            return self.final_state().clone();
        }
        let i = match self.times.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
            Ok(i) => return self.states[i].clone(),
            Err(i) => i,
        };
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        SpectralField::from_coeffs(
            self.states[i - 1].coeffs() * (1.0 - w) + self.states[i].coeffs() * w,
        )
    }

    /// Append another trajectory that starts where this one ends.
    pub fn extend(&mut self, other: Trajectory) {
        let mut iter = other.times.into_iter().zip(other.states);
        if let Some(&last) = self.times.last() {
            for (t, s) in &mut iter {
                if t > last {
                    self.times.push(t);
                    self.states.push(s);
                    break;
                }
            }
        }
        for (t, s) in iter {
            self.times.push(t);
            self.states.push(s);
        }
    }
}

/// Modal source term: maps absolute time to an n x (N+1) coefficient array.
pub type SourceFn<'a> = &'a dyn Fn(f64) -> DMatrix<f64>;

struct ModeStepper {
    /// phi-stack per mode for the positive-lambda dense blocks.
    stacks: Vec<Vec<DMatrix<f64>>>,
    /// Structure-aware mode-0 data: stack for the top-left (m+1) block, the
    /// top-right coupling Y, and the split point.
    mode0: Option<Mode0Stepper>,
    h: f64,
}

struct Mode0Stepper {
    top: usize,
    stack: Vec<DMatrix<f64>>,
    coupling: DMatrix<f64>,
}

impl ModeStepper {
    /// Exact one-step advance maps for every mode at step size h.
    ///
    /// Mode 0 (lambda = 0) is special-cased on the block structure of A_J
    /// (rows m+2.. are zero), which keeps the uncontrolled zero-mode
    /// coefficients bit-identical under zero bottom input.
    fn new(dom: &SpectralDomain, sys: &LinearCascade, h: f64, transpose: bool) -> Self {
        let n = sys.species_count();
        let mut stacks = Vec::with_capacity(dom.mode_count());
        let mut mode0 = None;
        for k in 0..dom.mode_count() {
            let lam = dom.eigenvalue(k);
            if lam == 0.0 && !transpose {
                let top = (sys.control_count() + 1).min(n);
                let a_j = sys.coupling();
                let x = a_j.view((0, 0), (top, top)).into_owned();
                let coupling = a_j.view((0, top), (top, n - top)).into_owned();
                mode0 = Some(Mode0Stepper { top, stack: phi_stack(&x, h, 6), coupling });
                stacks.push(Vec::new());
            } else {
                let a = if transpose {
                    sys.mode_matrix(lam).transpose()
                } else {
                    sys.mode_matrix(lam)
                };
                stacks.push(phi_stack(&a, h, 5));
            }
        }
        Self { stacks, mode0, h }
    }

    /// Advance mode k by one step with input polynomial coefficients (in the
    /// normalized variable sigma = s/h).
    fn step(&self, k: usize, z: &DVector<f64>, coeffs: &[DVector<f64>]) -> DVector<f64> {
        if k == 0 {
            if let Some(m0) = &self.mode0 {
                return self.step_mode0(m0, z, coeffs);
            }
        }
        step_polynomial_input(&self.stacks[k], self.h, z, coeffs)
    }

    fn step_mode0(
        &self,
        m0: &Mode0Stepper,
        z: &DVector<f64>,
        coeffs: &[DVector<f64>],
    ) -> DVector<f64> {
        let n = z.len();
        let top = m0.top;
        let nb = n - top;
        let h = self.h;
        let z_top = z.rows(0, top).into_owned();
        let z_bot = z.rows(top, nb).into_owned();
        // bottom rows integrate their input directly: z_bot(sigma) is a
        // polynomial; its coefficients feed the top block through Y.
        let bot_poly: Vec<DVector<f64>> =
            coeffs.iter().map(|c| c.rows(top, nb).into_owned()).collect();
        let mut top_coeffs: Vec<DVector<f64>> = Vec::with_capacity(coeffs.len() + 1);
        for (j, c) in coeffs.iter().enumerate() {
            let mut tc = c.rows(0, top).into_owned();
            if j == 0 {
                tc += &m0.coupling * &z_bot;
            } else {
                // sigma^j term of z_bot(sigma) = h * b_{j-1}/j
                tc += &m0.coupling * &bot_poly[j - 1] * (h / j as f64);
            }
            top_coeffs.push(tc);
        }
        if !coeffs.is_empty() {
            let j = coeffs.len();
            top_coeffs.push(&m0.coupling * &bot_poly[j - 1] * (h / j as f64));
        }
        let new_top = step_polynomial_input(&m0.stack, h, &z_top, &top_coeffs);
        let mut out = DVector::zeros(n);
        out.rows_mut(0, top).copy_from(&new_top);
        let mut bot_inc = DVector::zeros(nb);
        let mut any = false;
        for (j, b) in bot_poly.iter().enumerate() {
            if b.iter().any(|&v| v != 0.0) {
                any = true;
                bot_inc += b * (h / (j + 1) as f64);
            }
        }
        let new_bot = if any { z_bot + bot_inc } else { z_bot };
        out.rows_mut(top, nb).copy_from(&new_bot);
        out
    }
}

/// Advance the linear cascade `dz_k/dt = (-lambda_k D_J + A_J) z_k + s_k +
/// B (W h)_k` from `t_span.0` to `t_span.1`, sampling every accepted step.
///
/// Control and source are evaluated in absolute time, so stage simulations on
/// sub-intervals compose exactly. Steps never straddle control nodes, hence
/// piecewise-linear controls are integrated exactly; sources are interpolated
/// cubically per step (4th-order quadrature).
pub fn simulate_linear(
    dom: &SpectralDomain,
    sys: &LinearCascade,
    z0: &SpectralField,
    control: Option<&ControlSignal>,
    source: Option<SourceFn>,
    t_span: (f64, f64),
    dt: f64,
) -> Result<Trajectory, SimError> {
    let n = sys.species_count();
    let nk = dom.mode_count();
    check_field_shape(z0, "initial state", n, nk)?;
    if let Some(c) = control {
        check_control_shape(c, sys.control_count(), nk)?;
    }
    let span = t_span.1 - t_span.0;
    if !(dt > 0.0 && dt.is_finite() && span > 0.0) {
        return Err(SimError::BadTimeGrid { dt, span });
    }
    let w_loc = dom.localization_matrix();

    // segment boundaries: control nodes inside the span
    let mut breaks = vec![t_span.0];
    if let Some(c) = control {
        for &t in c.times() {
            if t > t_span.0 + 1e-15 * span && t < t_span.1 - 1e-15 * span {
                breaks.push(t);
            }
        }
    }
    breaks.push(t_span.1);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * span.max(1.0));

    let mut traj = Trajectory { times: vec![t_span.0], states: vec![z0.clone()] };
    let mut state = z0.coeffs().clone();

    for seg in breaks.windows(2) {
        let (s0, s1) = (seg[0], seg[1]);
        let nsub = ((s1 - s0) / dt).ceil().max(1.0) as usize;
        let h = (s1 - s0) / nsub as f64;
        let stepper = ModeStepper::new(dom, sys, h, false);
        // control is linear across the segment: evaluate endpoints once
        let (cv0, cv1) = match control {
            Some(c) => (Some(c.eval(s0) * &w_loc), Some(c.eval(s1) * &w_loc)),
            None => (None, None),
        };
        for sub in 0..nsub {
            let t_a = s0 + sub as f64 * h;
            // input polynomial per mode, normalized variable sigma in [0,1]
            let mut poly: Vec<Vec<DVector<f64>>> = vec![Vec::new(); nk];
            if let (Some(v0), Some(v1)) = (&cv0, &cv1) {
                let w0 = (t_a - s0) / (s1 - s0);
                let w1 = (t_a + h - s0) / (s1 - s0);
                let at_a = v0 * (1.0 - w0) + v1 * w0;
                let at_b = v0 * (1.0 - w1) + v1 * w1;
                for k in 0..nk {
                    let mut c0 = DVector::zeros(n);
                    let mut c1 = DVector::zeros(n);
                    for i in 0..sys.control_count() {
                        c0[i] = at_a[(i, k)];
                        c1[i] = at_b[(i, k)] - at_a[(i, k)];
                    }
                    poly[k] = vec![c0, c1];
                }
            }
            if let Some(src) = source {
                let samples: Vec<DMatrix<f64>> =
                    (0..4).map(|q| src(t_a + h * q as f64 / 3.0)).collect();
                for k in 0..nk {
                    let cols: Vec<DVector<f64>> =
                        samples.iter().map(|s| s.column(k).into_owned()).collect();
                    let cubic = cubic_through_thirds([&cols[0], &cols[1], &cols[2], &cols[3]]);
                    if poly[k].is_empty() {
                        poly[k] = cubic.to_vec();
                    } else {
                        for (j, c) in cubic.into_iter().enumerate() {
                            if j < poly[k].len() {
                                poly[k][j] += c;
                            } else {
                                poly[k].push(c);
                            }
                        }
                    }
                }
            }
            let mut next = DMatrix::zeros(n, nk);
            for k in 0..nk {
                let zk = state.column(k).into_owned();
                let new = stepper.step(k, &zk, &poly[k]);
                next.set_column(k, &new);
            }
            state = next;
            let t_new = if sub + 1 == nsub { s1 } else { t_a + h };
            if state.iter().any(|v| !v.is_finite()) {
                return Err(SimError::NonfiniteState { t: t_new });
            }
            traj.times.push(t_new);
            traj.states.push(SpectralField::from_coeffs(state.clone()));
        }
    }
    Ok(traj)
}

/// Backward adjoint flow `-phi' = (-lambda_k D_J + A_J)^T phi` from data at
/// `t_span.1`, sampled on a uniform grid of `steps` intervals (ascending
/// times). Input-free, hence exact per mode at the grid points.
pub fn simulate_adjoint(
    dom: &SpectralDomain,
    sys: &LinearCascade,
    phi_t: &SpectralField,
    t_span: (f64, f64),
    steps: usize,
) -> Result<Trajectory, SimError> {
    let n = sys.species_count();
    let nk = dom.mode_count();
    check_field_shape(phi_t, "adjoint data", n, nk)?;
    let span = t_span.1 - t_span.0;
    if !(span > 0.0 && steps > 0) {
        return Err(SimError::BadTimeGrid { dt: span / steps.max(1) as f64, span });
    }
    let h = span / steps as f64;
    // phi(t - h) = exp(A^T h) phi(t)
    let props: Vec<DMatrix<f64>> =
        (0..nk).map(|k| (sys.mode_matrix(dom.eigenvalue(k)).transpose() * h).exp()).collect();
    let mut states = vec![phi_t.coeffs().clone()];
    for _ in 0..steps {
        let prev = states.last().unwrap();
        let mut next = DMatrix::zeros(n, nk);
        for k in 0..nk {
            next.set_column(k, &(&props[k] * prev.column(k)));
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonfiniteState { t: t_span.0 });
        }
        states.push(next);
    }
    states.reverse();
    let times = (0..=steps).map(|j| t_span.0 + j as f64 * h).collect();
    Ok(Trajectory {
        times,
        states: states.into_iter().map(SpectralField::from_coeffs).collect(),
    })
}

/// Pseudo-spectral evaluation machinery for one polynomial nonlinearity.
struct Collocation {
    synth: DMatrix<f64>,
    analysis: DMatrix<f64>,
}

impl Collocation {
    fn new(dom: &SpectralDomain, degree: u32) -> Self {
        let points = dom.dealias_points(degree);
        let synth = dom.synthesis_matrix(points);
        let analysis = synth.clone() * (dom.length() / points as f64);
        Self { synth, analysis }
    }

    fn to_values(&self, coeffs: &DMatrix<f64>) -> DMatrix<f64> {
        coeffs * self.synth.transpose()
    }

    fn to_coeffs(&self, values: &DMatrix<f64>) -> DMatrix<f64> {
        values * &self.analysis
    }
}

/// Pseudo-spectral pointwise map: synthesize the field on a dealiased
/// collocation grid, apply `f` to the per-point species values, project the
/// result back to coefficients.
pub fn apply_pointwise(
    dom: &SpectralDomain,
    degree: u32,
    field: &SpectralField,
    f: impl Fn(&[f64]) -> Vec<f64>,
) -> SpectralField {
    let coll = Collocation::new(dom, degree);
    let vals = coll.to_values(field.coeffs());
    let n = vals.nrows();
    let mut out = DMatrix::zeros(n, vals.ncols());
    for j in 0..vals.ncols() {
        let point: Vec<f64> = (0..n).map(|i| vals[(i, j)]).collect();
        let mapped = f(&point);
        for i in 0..n {
            out[(i, j)] = mapped[i];
        }
    }
    SpectralField::from_coeffs(coll.to_coeffs(&out))
}

/// IMEX (exact diffusion + ETD2RK explicit reaction) integrator for the
/// mass-action system in physical variables, with localized control on the
/// first m species.
pub fn simulate_nonlinear(
    dom: &SpectralDomain,
    net: &ReactionNetwork,
    u0: &SpectralField,
    control: Option<&ControlSignal>,
    t_span: (f64, f64),
    dt: f64,
    blowup_bound: f64,
) -> Result<Trajectory, SimError> {
    let n = net.species_count();
    let nk = dom.mode_count();
    check_field_shape(u0, "initial state", n, nk)?;
    if let Some(c) = control {
        check_control_shape(c, net.control_count(), nk)?;
    }
    let span = t_span.1 - t_span.0;
    if !(dt > 0.0 && span > 0.0) {
        return Err(SimError::BadTimeGrid { dt, span });
    }
    let steps = (span / dt).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let coll = Collocation::new(dom, net.total_degree());
    let w_loc = dom.localization_matrix();
    let m = net.control_count();

    // diagonal propagator & phi weights per (species, mode)
    let mut e = DMatrix::zeros(n, nk);
    let mut phi1 = DMatrix::zeros(n, nk);
    let mut phi2 = DMatrix::zeros(n, nk);
    let mut decay = DMatrix::zeros(n, nk);
    for i in 0..n {
        for k in 0..nk {
            let z = -dom.eigenvalue(k) * net.diffusivities()[i] * h;
            decay[(i, k)] = -dom.eigenvalue(k) * net.diffusivities()[i];
            e[(i, k)] = z.exp();
            phi1[(i, k)] = phi1_scalar(z);
            phi2[(i, k)] = phi2_scalar(z);
        }
    }

    let rates_modal = |coeffs: &DMatrix<f64>| -> (DMatrix<f64>, f64) {
        let vals = coll.to_values(coeffs);
        let mut out = DMatrix::zeros(n, vals.ncols());
        let mut sup: f64 = 0.0;
        for j in 0..vals.ncols() {
            let u: Vec<f64> = (0..n).map(|i| vals[(i, j)]).collect();
            sup = sup.max(u.iter().fold(0.0_f64, |a, &b| a.max(b.abs())));
            let f = reaction_rate(net, &u);
            for i in 0..n {
                out[(i, j)] = f[i];
            }
        }
        (coll.to_coeffs(&out), sup)
    };
    // Exact Duhamel increment of the localized control over one step: the
    // control is globally piecewise linear, so splitting at its own nodes and
    // integrating each piece against the scalar propagators loses nothing.
    // Sampling it on the macro grid instead would alias the narrow
    // high-amplitude windows the steering schedules produce.
    let control_kick = |t0: f64, t1: f64| -> DMatrix<f64> {
        let mut kick = DMatrix::zeros(n, nk);
        let c = match control {
            Some(c) => c,
            None => return kick,
        };
        let mut cuts = vec![t0];
        cuts.extend(c.times().iter().copied().filter(|&tc| tc > t0 && tc < t1));
        cuts.push(t1);
        for w in cuts.windows(2) {
            let delta = w[1] - w[0];
            if delta <= 0.0 {
                continue;
            }
            let ca = c.eval(w[0]) * &w_loc;
            let cb = c.eval(w[1]) * &w_loc;
            for i in 0..m {
                for k in 0..nk {
                    let z = decay[(i, k)] * delta;
                    kick[(i, k)] = kick[(i, k)] * z.exp()
                        + delta
                            * (phi1_scalar(z) * ca[(i, k)]
                                + phi2_scalar(z) * (cb[(i, k)] - ca[(i, k)]));
                }
            }
        }
        kick
    };

    let mut traj = Trajectory { times: vec![t_span.0], states: vec![u0.clone()] };
    let mut state = u0.coeffs().clone();
    for step in 0..steps {
        let t = t_span.0 + step as f64 * h;
        let (n0, sup) = rates_modal(&state);
        if sup > blowup_bound {
            return Err(SimError::BlowupDetected { t, sup, bound: blowup_bound });
        }
        let predictor =
            state.component_mul(&e) + n0.component_mul(&phi1) * h + control_kick(t, t + h);
        let (n1, _) = rates_modal(&predictor);
        state = predictor + (n1 - n0).component_mul(&phi2) * h;
        let t_new = if step + 1 == steps { t_span.1 } else { t + h };
        if state.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonfiniteState { t: t_new });
        }
        traj.times.push(t_new);
        traj.states.push(SpectralField::from_coeffs(state.clone()));
    }
    Ok(traj)
}

/// Same integrator in cascade variables: `dz_i/dt - d_i lap z_i = lap z_{i-1}
/// + G_i(z) + h_i 1_omega`, the linear part (including the cross-species
/// Laplacian coupling) advanced exactly per mode.
pub fn simulate_nonlinear_z(
    dom: &SpectralDomain,
    transform: &crate::cascade::CascadeTransform,
    net: &ReactionNetwork,
    s: &StationaryState,
    z0: &SpectralField,
    control: Option<&ControlSignal>,
    t_span: (f64, f64),
    dt: f64,
    blowup_bound: f64,
) -> Result<Trajectory, SimError> {
    let n = net.species_count();
    let nk = dom.mode_count();
    check_field_shape(z0, "initial state", n, nk)?;
    if let Some(c) = control {
        check_control_shape(c, net.control_count(), nk)?;
    }
    let span = t_span.1 - t_span.0;
    if !(dt > 0.0 && span > 0.0) {
        return Err(SimError::BadTimeGrid { dt, span });
    }
    let steps = (span / dt).ceil().max(1.0) as usize;
    let h = span / steps as f64;
    let coll = Collocation::new(dom, net.total_degree());
    let w_loc = dom.localization_matrix();
    let m = net.control_count();
    let sys = transform.linear_cascade();

    // per-mode exact propagator of the diffusion block -lambda_k D_J
    let mut e = Vec::with_capacity(nk);
    let mut phi1 = Vec::with_capacity(nk);
    let mut phi2 = Vec::with_capacity(nk);
    for k in 0..nk {
        if dom.eigenvalue(k) == 0.0 {
            e.push(DMatrix::identity(n, n));
            phi1.push(DMatrix::identity(n, n));
            phi2.push(DMatrix::identity(n, n) * 0.5);
        } else {
            let l = sys.diffusion() * (-dom.eigenvalue(k));
            let stack = phi_stack(&l, h, 2);
            e.push(stack[0].clone());
            phi1.push(stack[1].clone());
            phi2.push(stack[2].clone());
        }
    }

    let forcing = |coeffs: &DMatrix<f64>| -> (DMatrix<f64>, f64) {
        let vals = coll.to_values(coeffs);
        let mut gv = DMatrix::zeros(n, vals.ncols());
        let mut sup: f64 = 0.0;
        for j in 0..vals.ncols() {
            let z: Vec<f64> = (0..n).map(|i| vals[(i, j)]).collect();
            sup = sup.max(z.iter().fold(0.0_f64, |a, &b| a.max(b.abs())));
            let g = transform.transformed_nonlinearity(net, s, &z);
            for i in 0..n {
                gv[(i, j)] = g[i];
            }
        }
        (coll.to_coeffs(&gv), sup)
    };
    // Exact Duhamel increment of the control per mode, splitting the step at
    // the signal's nodes (see simulate_nonlinear); here the propagator is the
    // lower-triangular diffusion block, so each sub-segment needs its own phi
    // stack unless it spans the whole step.
    let pad = |row: &DMatrix<f64>, k: usize| -> DVector<f64> {
        let mut v = DVector::zeros(n);
        for i in 0..m {
            v[i] = row[(i, k)];
        }
        v
    };
    let control_kick = |t0: f64, t1: f64| -> Vec<DVector<f64>> {
        let mut kick = vec![DVector::zeros(n); nk];
        let c = match control {
            Some(c) => c,
            None => return kick,
        };
        let mut cuts = vec![t0];
        cuts.extend(c.times().iter().copied().filter(|&tc| tc > t0 && tc < t1));
        cuts.push(t1);
        let whole_step = cuts.len() == 2;
        for w in cuts.windows(2) {
            let delta = w[1] - w[0];
            if delta <= 0.0 {
                continue;
            }
            let ca = c.eval(w[0]) * &w_loc;
            let cb = c.eval(w[1]) * &w_loc;
            for k in 0..nk {
                let (ek, p1, p2) = if whole_step {
                    (e[k].clone(), phi1[k].clone(), phi2[k].clone())
                } else if dom.eigenvalue(k) == 0.0 {
                    (
                        DMatrix::identity(n, n),
                        DMatrix::identity(n, n),
                        DMatrix::identity(n, n) * 0.5,
                    )
                } else {
                    let l = sys.diffusion() * (-dom.eigenvalue(k));
                    let stack = phi_stack(&l, delta, 2);
                    (stack[0].clone(), stack[1].clone(), stack[2].clone())
                };
                let a = pad(&ca, k);
                let b = pad(&cb, k);
                kick[k] = &ek * &kick[k] + (p1 * &a + p2 * (b - &a)) * delta;
            }
        }
        kick
    };

    let mut traj = Trajectory { times: vec![t_span.0], states: vec![z0.clone()] };
    let mut state = z0.coeffs().clone();
    for step in 0..steps {
        let t = t_span.0 + step as f64 * h;
        let (n0, sup) = forcing(&state);
        if sup > blowup_bound {
            return Err(SimError::BlowupDetected { t, sup, bound: blowup_bound });
        }
        let kick = control_kick(t, t + h);
        let mut predictor = DMatrix::zeros(n, nk);
        for k in 0..nk {
            let col = &e[k] * state.column(k) + &phi1[k] * n0.column(k) * h + &kick[k];
            predictor.set_column(k, &col);
        }
        let (n1, _) = forcing(&predictor);
        let diff = n1 - n0;
        let mut next = DMatrix::zeros(n, nk);
        for k in 0..nk {
            let col = predictor.column(k) + &phi2[k] * diff.column(k) * h;
            next.set_column(k, &col);
        }
        state = next;
        let t_new = if step + 1 == steps { t_span.1 } else { t + h };
        if state.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonfiniteState { t: t_new });
        }
        traj.times.push(t_new);
        traj.states.push(SpectralField::from_coeffs(state.clone()));
    }
    Ok(traj)
}

fn phi1_scalar(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        (z.exp() - 1.0) / z
    }
}

fn phi2_scalar(z: f64) -> f64 {
    if z.abs() < 1e-4 {
        0.5 + z / 6.0 + z * z / 24.0 + z * z * z / 120.0
    } else {
        (z.exp() - 1.0 - z) / (z * z)
    }
}

fn check_field_shape(
    f: &SpectralField,
    what: &'static str,
    species: usize,
    nk: usize,
) -> Result<(), SimError> {
    if f.species_count() != species {
        return Err(SimError::ShapeMismatch {
            what,
            axis: "species",
            got: f.species_count(),
            expected: species,
        });
    }
    if f.coeffs().ncols() != nk {
        return Err(SimError::ShapeMismatch {
            what,
            axis: "modes",
            got: f.coeffs().ncols(),
            expected: nk,
        });
    }
    Ok(())
}

fn check_control_shape(c: &ControlSignal, m: usize, nk: usize) -> Result<(), SimError> {
    if c.controlled_species() != m {
        return Err(SimError::ShapeMismatch {
            what: "control",
            axis: "species",
            got: c.controlled_species(),
            expected: m,
        });
    }
    if c.max_mode() + 1 != nk {
        return Err(SimError::ShapeMismatch {
            what: "control",
            axis: "modes",
            got: c.max_mode() + 1,
            expected: nk,
        });
    }
    Ok(())
}
