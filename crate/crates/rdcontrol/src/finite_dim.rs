//! Explicit steering of one spectral mode of the cascade to zero.
//!
//! The construction: pick the free solution `ybar(t) = e^{tA} y0`, glue it to
//! zero with a smooth cutoff `eta` on the coordinates we may choose freely
//! (the first m-1 and the last), and recover the remaining coordinates by
//! solving their own ODE rows backwards — each row of the cascade determines
//! the coordinate to its left. The control is whatever the first m rows then
//! require: `h = y' - A y`.
//!
//! Every time derivative is tracked symbolically. A path coordinate is stored
//! as `y(t) = sum_p eta^(p)(t) * <w_p, ybar(t)>`; differentiation acts on the
//! coefficient family by `w_p -> w_{p-1} + A^T w_p`, so no finite differences
//! ever enter (the reverse induction would amplify them by powers of lambda).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FiniteDimError {
    #[error("cutoff derivative order {requested} exceeds the supported maximum {max}")]
    OrderTooHigh { requested: usize, max: usize },
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error(
        "the zero mode only steers data supported on the first m+1 coordinates; \
         component {index} has magnitude {value:.3e}"
    )]
    LambdaZeroUnsupported { index: usize, value: f64 },
    #[error("horizon must lie in (0, 1], got {0}")]
    InvalidHorizon(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// One spectral mode of the cascade as a finite-dimensional control system
/// `y' = A y + B h`, `A = -lambda D_J + A_J`, `B` the injection into the
/// first m rows.
#[derive(Debug, Clone)]
pub struct ModeSystem {
    a: DMatrix<f64>,
    m: usize,
    lambda: f64,
    tau: f64,
}

impl ModeSystem {
    pub fn new(a: DMatrix<f64>, m: usize, lambda: f64, tau: f64) -> Result<Self, FiniteDimError> {
        if a.nrows() != a.ncols() {
            return Err(FiniteDimError::ShapeMismatch(format!(
                "system matrix is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if m == 0 || m > a.nrows() {
            return Err(FiniteDimError::ShapeMismatch(format!(
                "control count {m} out of range for {} coordinates",
                a.nrows()
            )));
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(FiniteDimError::InvalidHorizon(tau));
        }
        if lambda < 0.0 {
            return Err(FiniteDimError::ShapeMismatch(format!("negative eigenvalue {lambda}")));
        }
        Ok(Self { a, m, lambda, tau })
    }

    pub fn from_cascade(
        cascade: &crate::cascade::LinearCascade,
        lambda: f64,
        tau: f64,
    ) -> Result<Self, FiniteDimError> {
        Self::new(cascade.mode_matrix(lambda), cascade.control_count(), lambda, tau)
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn control_count(&self) -> usize {
        self.m
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn horizon(&self) -> f64 {
        self.tau
    }
}

/// `A^l e^{tA} y0`: the free solution and its exact time derivatives.
pub fn free_solution_derivatives(
    sys: &ModeSystem,
    y0: &DVector<f64>,
    t: f64,
    l: usize,
) -> DVector<f64> {
    let mut v = (&sys.a * t).exp() * y0;
    for _ in 0..l {
        v = &sys.a * v;
    }
    v
}

const MAX_SUPPORTED_ORDER: usize = 24;

/// Smooth transition that is identically 1 on [0, tau/3] and 0 on
/// [2 tau/3, tau], built from the classical `exp(-1/x)` bump. Derivatives of
/// any order up to `derivative_order_max` are evaluated by exact recurrences
/// on the rational-exponential form, never by differencing.
#[derive(Debug, Clone)]
pub struct SmoothCutoff {
    tau: f64,
    derivative_order_max: usize,
    /// psi^(p)(x) = r[p](1/x) exp(-1/x); polynomials by the recurrence
    /// R_{p+1}(y) = y^2 (R_p(y) - R_p'(y)).
    rational_parts: Vec<Vec<f64>>,
}

impl SmoothCutoff {
    pub fn new(tau: f64, derivative_order_max: usize) -> Result<Self, FiniteDimError> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(FiniteDimError::InvalidHorizon(tau));
        }
        if derivative_order_max > MAX_SUPPORTED_ORDER {
            return Err(FiniteDimError::OrderTooHigh {
                requested: derivative_order_max,
                max: MAX_SUPPORTED_ORDER,
            });
        }
        let mut rational_parts = vec![vec![1.0]];
        for _ in 0..derivative_order_max {
            let last = rational_parts.last().unwrap();
            let deriv = poly_derivative(last);
            let mut diff = last.clone();
            for (i, d) in deriv.iter().enumerate() {
                diff[i] -= d;
            }
            // multiply by y^2
            let mut next = vec![0.0, 0.0];
            next.extend_from_slice(&diff);
            rational_parts.push(next);
        }
        Ok(Self { tau, derivative_order_max, rational_parts })
    }

    pub fn horizon(&self) -> f64 {
        self.tau
    }

    pub fn max_order(&self) -> usize {
        self.derivative_order_max
    }

    /// eta^(p)(t).
    pub fn eval(&self, t: f64, p: usize) -> Result<f64, FiniteDimError> {
        Ok(self.derivatives(t, p)?[p])
    }

    /// All of eta, eta', ..., eta^(up_to) at once.
    pub fn derivatives(&self, t: f64, up_to: usize) -> Result<Vec<f64>, FiniteDimError> {
        if up_to > self.derivative_order_max {
            return Err(FiniteDimError::OrderTooHigh {
                requested: up_to,
                max: self.derivative_order_max,
            });
        }
        let third = self.tau / 3.0;
        let mut out = vec![0.0; up_to + 1];
        if t <= third {
            out[0] = 1.0;
            return Ok(out);
        }
        if t >= 2.0 * third {
            return Ok(out);
        }
        let u = (t - third) / third;
        let s = self.step_derivatives(u, up_to);
        out[0] = 1.0 - s[0];
        let rate = 1.0 / third;
        let mut chain = 1.0;
        for (p, o) in out.iter_mut().enumerate().skip(1) {
            chain *= rate;
            *o = -chain * s[p];
        }
        Ok(out)
    }

    /// Derivatives of the smoothed step s(u) = psi(u) / (psi(u) + psi(1-u))
    /// through the Leibniz recurrence on s * D = psi.
    fn step_derivatives(&self, u: f64, up_to: usize) -> Vec<f64> {
        let psi_u: Vec<f64> = (0..=up_to).map(|p| self.psi(u, p)).collect();
        let psi_c: Vec<f64> = (0..=up_to).map(|p| self.psi(1.0 - u, p)).collect();
        let d: Vec<f64> = (0..=up_to)
            .map(|q| psi_u[q] + if q % 2 == 0 { psi_c[q] } else { -psi_c[q] })
            .collect();
        let mut s = vec![0.0; up_to + 1];
        for p in 0..=up_to {
            let mut acc = psi_u[p];
            let mut binom = 1.0;
            for q in 0..p {
                // C(p, q) built incrementally: C(p,0) = 1, C(p,q+1) = C(p,q)(p-q)/(q+1)
                acc -= binom * s[q] * d[p - q];
                binom = binom * (p - q) as f64 / (q + 1) as f64;
            }
            s[p] = acc / d[0];
        }
        s
    }

    /// psi^(p)(x) for psi(x) = exp(-1/x) on x > 0, else 0.
    fn psi(&self, x: f64, p: usize) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let y = 1.0 / x;
        if y >= 500.0 {
            // poly(y) * e^{-y} is below 1e-180 here; avoid inf * 0
            return 0.0;
        }
        poly_eval(&self.rational_parts[p], y) * (-y).exp()
    }

    /// Measured plateau constants: C_p = tau^p * max_t |eta^(p)(t)| on a
    /// dense grid, so the bound |eta^(p)| <= C_p / tau^p holds by definition.
    pub fn measured_constants(&self, samples: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.derivative_order_max + 1];
        for j in 0..=samples {
            let t = self.tau * j as f64 / samples as f64;
            let derivs = self.derivatives(t, self.derivative_order_max).unwrap();
            for (p, v) in derivs.iter().enumerate() {
                c[p] = f64::max(c[p], v.abs() * self.tau.powi(p as i32));
            }
        }
        c
    }
}

fn poly_derivative(p: &[f64]) -> Vec<f64> {
    (1..p.len()).map(|i| p[i] * i as f64).collect()
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// A path coordinate `y(t) = sum_p eta^(p)(t) <w_p, ybar(t)>`, closed under
/// time differentiation.
#[derive(Debug, Clone)]
struct CutoffCombo {
    w: Vec<DVector<f64>>,
}

impl CutoffCombo {
    fn basis(i: usize, dim: usize) -> Self {
        let mut e = DVector::zeros(dim);
        e[i] = 1.0;
        Self { w: vec![e] }
    }

    fn dim(&self) -> usize {
        self.w[0].len()
    }

    fn order(&self) -> usize {
        self.w.len() - 1
    }

    /// d/dt: w_p -> w_{p-1} + A^T w_p.
    fn derivative(&self, a_t: &DMatrix<f64>) -> Self {
        let len = self.w.len();
        let dim = self.dim();
        let mut out = Vec::with_capacity(len + 1);
        for p in 0..=len {
            let mut v = if p < len { a_t * &self.w[p] } else { DVector::zeros(dim) };
            if p > 0 {
                v += &self.w[p - 1];
            }
            out.push(v);
        }
        Self { w: out }
    }

    fn axpy(&mut self, c: f64, other: &Self) {
        while self.w.len() < other.w.len() {
            self.w.push(DVector::zeros(self.dim()));
        }
        for (p, ow) in other.w.iter().enumerate() {
            self.w[p].axpy(c, ow, 1.0);
        }
    }

    fn scale(&mut self, c: f64) {
        for w in &mut self.w {
            *w *= c;
        }
    }

    fn eval(&self, eta: &[f64], ybar: &DVector<f64>) -> f64 {
        self.w.iter().zip(eta).map(|(w, e)| e * w.dot(ybar)).sum()
    }
}

/// The steering produced by [`brunovsky_control`]: closed-form state and
/// control paths on [0, tau].
pub struct ModeSteering {
    sys: ModeSystem,
    cutoff: SmoothCutoff,
    /// effective system the combos live on (full, or the top m+1 block for
    /// the zero mode)
    eff_dim: usize,
    a_eff: DMatrix<f64>,
    y0_eff: DVector<f64>,
    state_combos: Vec<CutoffCombo>,
    control_combos: Vec<CutoffCombo>,
    max_order: usize,
}

/// Sampled output of a steering: uniform grid with states and controls.
pub struct SteeredPath {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

/// Relative threshold below which the controllability pivot is refused.
const PIVOT_FLOOR: f64 = 1e-12;

/// Steer `y0` to zero at time `sys.tau` along the cascade structure.
pub fn brunovsky_control(sys: &ModeSystem, y0: &DVector<f64>) -> Result<ModeSteering, FiniteDimError> {
    let n = sys.dim();
    let m = sys.m;
    if y0.len() != n {
        return Err(FiniteDimError::ShapeMismatch(format!(
            "initial state has {} entries, system has {n}",
            y0.len()
        )));
    }

    let (eff_dim, a_eff, y0_eff) = if sys.lambda == 0.0 && n > m + 1 {
        // reduced construction: the rows beyond m+1 are inert at lambda = 0,
        // so their data must already vanish
        let scale = y0.amax().max(1e-300);
        for i in m + 1..n {
            if y0[i].abs() > 1e-12 * scale {
                return Err(FiniteDimError::LambdaZeroUnsupported { index: i, value: y0[i] });
            }
        }
        let top = m + 1;
        (
            top,
            sys.a.view((0, 0), (top, top)).into_owned(),
            y0.rows(0, top).into_owned(),
        )
    } else {
        (n, sys.a.clone(), y0.clone())
    };

    let a_t = a_eff.transpose();
    let mut combos: Vec<Option<CutoffCombo>> = vec![None; eff_dim];
    for i in 0..m.saturating_sub(1) {
        combos[i] = Some(CutoffCombo::basis(i, eff_dim));
    }
    combos[eff_dim - 1] = Some(CutoffCombo::basis(eff_dim - 1, eff_dim));

    // reverse induction: row r = i+1 of the ODE determines coordinate i
    for i in (m - 1..eff_dim - 1).rev() {
        let r = i + 1;
        let mut c = combos[r]
            .as_ref()
            .expect("row source computed")
            .derivative(&a_t);
        for s in 0..eff_dim {
            if s == i || a_eff[(r, s)] == 0.0 {
                continue;
            }
            match combos[s].as_ref() {
                Some(cs) => c.axpy(-a_eff[(r, s)], cs),
                None => {
                    return Err(FiniteDimError::AssumptionViolation(format!(
                        "row {} couples to coordinate {} outside the cascade order",
                        r + 1,
                        s + 1
                    )))
                }
            }
        }
        let pivot = a_eff[(r, i)];
        let scale = a_eff.row(r).amax().max(1e-300);
        if pivot.abs() <= PIVOT_FLOOR * scale {
            return Err(FiniteDimError::AssumptionViolation(format!(
                "pivot entry ({}, {}) of the mode matrix vanishes",
                r + 1,
                i + 1
            )));
        }
        c.scale(1.0 / pivot);
        combos[i] = Some(c);
    }

    let state_combos: Vec<CutoffCombo> = combos.into_iter().map(Option::unwrap).collect();

    // h_i = y_i' - (A y)_i on the first m rows
    let mut control_combos = Vec::with_capacity(m);
    for i in 0..m {
        let mut h = state_combos[i].derivative(&a_t);
        for s in 0..eff_dim {
            if a_eff[(i, s)] != 0.0 {
                h.axpy(-a_eff[(i, s)], &state_combos[s]);
            }
        }
        control_combos.push(h);
    }

    let max_order = state_combos
        .iter()
        .chain(&control_combos)
        .map(CutoffCombo::order)
        .max()
        .unwrap_or(0);
    let cutoff = SmoothCutoff::new(sys.tau, max_order)?;

    Ok(ModeSteering {
        sys: sys.clone(),
        cutoff,
        eff_dim,
        a_eff,
        y0_eff,
        state_combos,
        control_combos,
        max_order,
    })
}

impl ModeSteering {
    pub fn cutoff(&self) -> &SmoothCutoff {
        &self.cutoff
    }

    fn ybar_at(&self, t: f64) -> DVector<f64> {
        (&self.a_eff * t).exp() * &self.y0_eff
    }

    fn embed(&self, v: DVector<f64>) -> DVector<f64> {
        if v.len() == self.sys.dim() {
            v
        } else {
            let mut out = DVector::zeros(self.sys.dim());
            out.rows_mut(0, v.len()).copy_from(&v);
            out
        }
    }

    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let ybar = self.ybar_at(t);
        let eta = self.cutoff.derivatives(t, self.max_order).expect("order in range");
        let v = DVector::from_iterator(
            self.eff_dim,
            self.state_combos.iter().map(|c| c.eval(&eta, &ybar)),
        );
        self.embed(v)
    }

    pub fn control_at(&self, t: f64) -> DVector<f64> {
        let ybar = self.ybar_at(t);
        let eta = self.cutoff.derivatives(t, self.max_order).expect("order in range");
        DVector::from_iterator(
            self.sys.m,
            self.control_combos.iter().map(|c| c.eval(&eta, &ybar)),
        )
    }

    /// Uniform grid of `points + 1` nodes with exact free-solution stepping.
    pub fn sample(&self, points: usize) -> SteeredPath {
        let h = self.sys.tau / points as f64;
        let step = (&self.a_eff * h).exp();
        let mut ybar = self.y0_eff.clone();
        let mut path = SteeredPath {
            times: Vec::with_capacity(points + 1),
            states: Vec::with_capacity(points + 1),
            controls: Vec::with_capacity(points + 1),
        };
        for j in 0..=points {
            let t = h * j as f64;
            let eta = self.cutoff.derivatives(t, self.max_order).expect("order in range");
            let state = DVector::from_iterator(
                self.eff_dim,
                self.state_combos.iter().map(|c| c.eval(&eta, &ybar)),
            );
            path.times.push(t);
            path.states.push(self.embed(state));
            path.controls.push(DVector::from_iterator(
                self.sys.m,
                self.control_combos.iter().map(|c| c.eval(&eta, &ybar)),
            ));
            ybar = &step * ybar;
        }
        path
    }

    /// `int_0^tau |h|^2 dt` by Simpson on a uniform grid (points must be even).
    pub fn control_energy(&self, points: usize) -> f64 {
        let points = points + points % 2;
        let path = self.sample(points);
        let h = self.sys.tau / points as f64;
        let mut acc = 0.0;
        for j in 0..points / 2 {
            let f0 = path.controls[2 * j].norm_squared();
            let f1 = path.controls[2 * j + 1].norm_squared();
            let f2 = path.controls[2 * j + 2].norm_squared();
            acc += h / 3.0 * (f0 + 4.0 * f1 + f2);
        }
        acc
    }

    /// Largest pointwise defect of `y' - A y - B h` over the grid, relative
    /// to the local scale. Derivatives come from the symbolic combos.
    pub fn residual_sup(&self, points: usize) -> f64 {
        let a_t = self.a_eff.transpose();
        let deriv_combos: Vec<CutoffCombo> =
            self.state_combos.iter().map(|c| c.derivative(&a_t)).collect();
        let order = deriv_combos.iter().map(CutoffCombo::order).max().unwrap_or(0);
        let cutoff = SmoothCutoff::new(self.sys.tau, order).expect("order in range");
        let h = self.sys.tau / points as f64;
        let step = (&self.a_eff * h).exp();
        let mut ybar = self.y0_eff.clone();
        let mut worst = 0.0_f64;
        for j in 0..=points {
            let t = h * j as f64;
            let eta = cutoff.derivatives(t, order).expect("order in range");
            let y = DVector::from_iterator(
                self.eff_dim,
                self.state_combos.iter().map(|c| c.eval(&eta, &ybar)),
            );
            let dy = DVector::from_iterator(
                self.eff_dim,
                deriv_combos.iter().map(|c| c.eval(&eta, &ybar)),
            );
            let hstep = DVector::from_iterator(
                self.sys.m,
                self.control_combos.iter().map(|c| c.eval(&eta, &ybar)),
            );
            let mut res = dy - &self.a_eff * &y;
            for i in 0..self.sys.m {
                res[i] -= hstep[i];
            }
            let scale = (self.a_eff.norm() * y.norm() + hstep.norm()).max(1e-12);
            worst = worst.max(res.amax() / scale);
            ybar = &step * ybar;
        }
        worst
    }
}

/// Result of the cost sweep: least-squares slopes of `log ||h||^2` against
/// `log(1/tau)` and against `log lambda`, plus the theoretical exponent
/// `2 (n - m) + 1` they must not exceed (by more than fitting slack).
#[derive(Debug, Clone)]
pub struct CostExponents {
    pub tau_slope: f64,
    pub lambda_slope: f64,
    pub bound: f64,
}

pub fn cost_exponent_fit(
    cascade: &crate::cascade::LinearCascade,
    y0: &DVector<f64>,
    taus: &[f64],
    lambda_fixed: f64,
    lambdas: &[f64],
    tau_fixed: f64,
) -> Result<CostExponents, FiniteDimError> {
    let n = cascade.species_count();
    let m = cascade.control_count();
    let energy = |tau: f64, lambda: f64| -> Result<f64, FiniteDimError> {
        let sys = ModeSystem::from_cascade(cascade, lambda, tau)?;
        let steering = brunovsky_control(&sys, y0)?;
        Ok(steering.control_energy(512))
    };
    let mut tau_pts = Vec::with_capacity(taus.len());
    for &tau in taus {
        tau_pts.push(((1.0 / tau).ln(), energy(tau, lambda_fixed)?.ln()));
    }
    let mut lam_pts = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        lam_pts.push((lambda.ln(), energy(tau_fixed, lambda)?.ln()));
    }
    Ok(CostExponents {
        tau_slope: regression_slope(&tau_pts),
        lambda_slope: regression_slope(&lam_pts),
        bound: 2.0 * (n - m) as f64 + 1.0,
    })
}

fn regression_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::CascadeTransform;
    use crate::reaction::{ReactionNetwork, StationaryState};
    use approx::assert_relative_eq;

    fn demo_cascade() -> crate::cascade::LinearCascade {
        let net = ReactionNetwork::demo_quartet();
        let s = StationaryState::new(&net, vec![1.0; 4]).unwrap();
        CascadeTransform::new(&net, &s).unwrap().linear_cascade().clone()
    }

    #[test]
    fn cutoff_plateaus() {
        let c = SmoothCutoff::new(0.9, 5).unwrap();
        for &t in &[0.0, 0.1, 0.2, 0.3] {
            assert_eq!(c.eval(t, 0).unwrap(), 1.0);
            for p in 1..=5 {
                assert_eq!(c.eval(t, p).unwrap(), 0.0);
            }
        }
        for &t in &[0.6, 0.7, 0.9] {
            for p in 0..=5 {
                assert_eq!(c.eval(t, p).unwrap(), 0.0);
            }
        }
        assert_relative_eq!(c.eval(0.45, 0).unwrap(), 0.5, epsilon = 1e-12); // midpoint by symmetry
        assert!(matches!(c.eval(0.4, 6), Err(FiniteDimError::OrderTooHigh { .. })));
    }

    #[test]
    fn cutoff_is_monotone_and_continuous_at_joints() {
        let c = SmoothCutoff::new(0.6, 8).unwrap();
        let mut prev = 1.0;
        for j in 0..=2000 {
            let t = 0.6 * j as f64 / 2000.0;
            let v = c.eval(t, 0).unwrap();
            assert!(v <= prev + 1e-12, "eta must not increase (t = {t})");
            prev = v;
        }
        // all derivatives fade out toward the plateau joints
        for p in 1..=8 {
            let near_left = c.eval(0.2 + 1e-9, p).unwrap();
            let near_right = c.eval(0.4 - 1e-9, p).unwrap();
            assert!(near_left.abs() < 1e-6, "order {p} at left joint: {near_left:.3e}");
            assert!(near_right.abs() < 1e-6, "order {p} at right joint: {near_right:.3e}");
        }
    }

    #[test]
    fn cutoff_derivatives_match_finite_differences() {
        let c = SmoothCutoff::new(1.0, 6).unwrap();
        let h = 1e-5;
        for &t in &[0.38, 0.45, 0.52, 0.61] {
            for p in 1..=4 {
                let analytic = c.eval(t, p).unwrap();
                let fd = (c.eval(t + h, p - 1).unwrap() - c.eval(t - h, p - 1).unwrap()) / (2.0 * h);
                let scale = analytic.abs().max(1.0);
                assert!(
                    (analytic - fd).abs() < 1e-4 * scale,
                    "order {p} at t={t}: analytic {analytic:.6e} vs fd {fd:.6e}"
                );
            }
        }
    }

    #[test]
    fn cutoff_constants_scale_with_horizon() {
        // C_p = tau^p max|eta^(p)| is invariant under rescaling the horizon
        let c1 = SmoothCutoff::new(1.0, 3).unwrap().measured_constants(4000);
        let c2 = SmoothCutoff::new(0.25, 3).unwrap().measured_constants(4000);
        for p in 0..=3 {
            assert_relative_eq!(c1[p], c2[p], max_relative = 1e-6);
        }
        assert_eq!(c1[0], 1.0);
        assert!(c1[1] > 1.0 && c1[1] < 20.0, "C_1 = {}", c1[1]);
    }

    #[test]
    fn free_solution_closed_forms() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -3.0]);
        let sys = ModeSystem::new(a, 1, 1.0, 0.5).unwrap();
        let y0 = DVector::from_row_slice(&[2.0, -1.0]);
        assert_eq!(free_solution_derivatives(&sys, &y0, 0.0, 0), y0);
        let v = free_solution_derivatives(&sys, &y0, 0.3, 2);
        assert_relative_eq!(v[0], 1.0 * 2.0 * (-0.3_f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(v[1], 9.0 * -1.0 * (-0.9_f64).exp(), epsilon = 1e-12);
        // nilpotent: A^2 = 0
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let sysn = ModeSystem::new(nil, 1, 0.0, 0.5).unwrap();
        let z = free_solution_derivatives(&sysn, &y0, 0.7, 2);
        assert_eq!(z.amax(), 0.0);
    }

    #[test]
    fn zero_data_stays_zero() {
        let sys = ModeSystem::from_cascade(&demo_cascade(), 4.0, 0.8).unwrap();
        let steering = brunovsky_control(&sys, &DVector::zeros(4)).unwrap();
        let path = steering.sample(64);
        for (y, h) in path.states.iter().zip(&path.controls) {
            assert_eq!(y.amax(), 0.0);
            assert_eq!(h.amax(), 0.0);
        }
    }

    #[test]
    fn two_species_steering_passes_ode_oracle() {
        // A = -lambda diag(1,2) + [[0,0],[1,0]], m = 1
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -2.0]);
        let sys = ModeSystem::new(a.clone(), 1, 1.0, 0.8).unwrap();
        let y0 = DVector::from_row_slice(&[0.7, -0.4]);
        let steering = brunovsky_control(&sys, &y0).unwrap();

        assert_eq!(steering.state_at(0.8).amax(), 0.0, "terminal state is exactly zero");
        assert!(steering.residual_sup(400) < 1e-11);

        // independent check: classical RK4 on y' = A y + B h with sampled h
        let steps = 40_000;
        let dt = 0.8 / steps as f64;
        let half_grid: Vec<DVector<f64>> =
            (0..=2 * steps).map(|j| steering.control_at(dt * j as f64 / 2.0)).collect();
        let b_apply = |h: &DVector<f64>| {
            let mut v = DVector::zeros(2);
            v[0] = h[0];
            v
        };
        let mut y = y0.clone();
        for j in 0..steps {
            let f = |yy: &DVector<f64>, stage: usize| &a * yy + b_apply(&half_grid[2 * j + stage]);
            let k1 = f(&y, 0);
            let k2 = f(&(&y + &k1 * (dt / 2.0)), 1);
            let k3 = f(&(&y + &k2 * (dt / 2.0)), 1);
            let k4 = f(&(&y + &k3 * dt), 2);
            y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        }
        assert!(
            y.amax() <= 1e-10 * y0.amax().max(1.0),
            "ODE oracle terminal state {:.3e}",
            y.amax()
        );
    }

    #[test]
    fn state_glues_free_flow_to_zero() {
        let sys = ModeSystem::from_cascade(&demo_cascade(), 2.5, 0.9).unwrap();
        let y0 = DVector::from_row_slice(&[0.4, -0.2, 0.3, 0.1]);
        let steering = brunovsky_control(&sys, &y0).unwrap();
        assert_eq!(steering.state_at(0.0), y0, "starts exactly at the data");
        // on the first third: the free solution, control silent
        for &t in &[0.05, 0.15, 0.25] {
            let free = free_solution_derivatives(&sys, &y0, t, 0);
            assert!((steering.state_at(t) - free).amax() < 1e-12);
            assert_eq!(steering.control_at(t).amax(), 0.0);
        }
        // on the last third: everything is silent
        for &t in &[0.65, 0.75, 0.9] {
            assert_eq!(steering.state_at(t).amax(), 0.0);
            assert_eq!(steering.control_at(t).amax(), 0.0);
        }
        assert!(steering.residual_sup(600) < 1e-11);
    }

    #[test]
    fn control_is_linear_in_data() {
        let sys = ModeSystem::from_cascade(&demo_cascade(), 3.0, 0.7).unwrap();
        let y0 = DVector::from_row_slice(&[0.2, 0.1, -0.3, 0.25]);
        let s1 = brunovsky_control(&sys, &y0).unwrap();
        let s2 = brunovsky_control(&sys, &(&y0 * 2.0)).unwrap();
        for &t in &[0.3, 0.4, 0.5] {
            let h1 = s1.control_at(t);
            let h2 = s2.control_at(t);
            assert!((h2 - &h1 * 2.0).amax() < 1e-10 * h1.amax().max(1.0));
        }
        // and the energy quadruples
        let e1 = s1.control_energy(512);
        let e2 = s2.control_energy(512);
        assert_relative_eq!(e2, 4.0 * e1, max_relative = 1e-10);
    }

    #[test]
    fn zero_mode_reduced_construction() {
        let cascade = demo_cascade();
        let sys = ModeSystem::from_cascade(&cascade, 0.0, 0.8).unwrap();
        // data on the first m+1 = 3 coordinates is steerable
        let y0 = DVector::from_row_slice(&[0.5, -0.3, 0.2, 0.0]);
        let steering = brunovsky_control(&sys, &y0).unwrap();
        assert_eq!(steering.state_at(0.8).amax(), 0.0);
        assert!(steering.residual_sup(400) < 1e-11);
        // the inert coordinate stays identically zero
        for &t in &[0.1, 0.4, 0.7] {
            assert_eq!(steering.state_at(t)[3], 0.0);
        }
        // data touching the inert coordinate is rejected
        let bad = DVector::from_row_slice(&[0.5, -0.3, 0.2, 0.1]);
        assert!(matches!(
            brunovsky_control(&sys, &bad),
            Err(FiniteDimError::LambdaZeroUnsupported { index: 3, .. })
        ));
    }

    #[test]
    fn cost_exponents_respect_lemma_bound() {
        // two-species cascade: bound 2(n - m) + 1 = 3
        let d = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let aj = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]);
        let cascade = crate::cascade::LinearCascade::new(d, aj, 1).unwrap();
        let y0 = DVector::from_row_slice(&[1.0, 1.0]);
        let taus = [0.4, 0.3, 0.22, 0.16, 0.12, 0.08];
        let lambdas = [6.0, 9.0, 14.0, 20.0, 30.0, 45.0];
        let fit = cost_exponent_fit(&cascade, &y0, &taus, 0.5, &lambdas, 0.5).unwrap();
        assert_eq!(fit.bound, 3.0);
        assert!(fit.tau_slope <= fit.bound + 0.5, "tau slope {:.2}", fit.tau_slope);
        assert!(fit.lambda_slope <= fit.bound + 0.5, "lambda slope {:.2}", fit.lambda_slope);
        // the small-horizon blow-up is genuinely polynomial: slope near 3
        assert!(fit.tau_slope > 1.5, "tau slope {:.2}", fit.tau_slope);
    }

    #[test]
    fn horizon_outside_unit_interval_is_refused() {
        let cascade = demo_cascade();
        assert!(matches!(
            ModeSystem::from_cascade(&cascade, 1.0, 1.4),
            Err(FiniteDimError::InvalidHorizon(_))
        ));
        assert!(matches!(
            ModeSystem::from_cascade(&cascade, 1.0, 0.0),
            Err(FiniteDimError::InvalidHorizon(_))
        ));
    }
}
