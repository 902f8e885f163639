//! Change of variables that turns the linearized mass-action system into an
//! integrator-like cascade.
//!
//! The transform is a lower-triangular matrix `P`: the identity on the m
//! controlled species, and on the uncontrolled block
//!
//! ```text
//! P[k][l] = 1 / ( nu_l * prod_{r in uncontrolled, r <= k, r != l} (d_l - d_r) )
//! ```
//!
//! with `nu = beta - alpha`. Two exact algebraic facts make it work:
//! `P D = D_J P` with `D_J` the diffusion cascade (diagonal plus unit
//! subdiagonal on the uncontrolled block), and `sum_l P[k][l] nu_l = 0` for
//! every row `k >= m+2`, which wipes the nonlinearity out of those rows.
//! Both are checked numerically by [`CascadeTransform::residuals`].

use crate::reaction::{rate_jacobian, ReactionNetwork, StationaryState};
use crate::spectral::{SpectralDomain, SpectralField};
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("assumption violated: {0}")]
    AssumptionViolation(String),
    #[error("coincident values make a denominator vanish: {0}")]
    ZeroDenominator(String),
}

/// The constant-coefficient linear part of the cascade: `z' = -lambda D_J z
/// + A_J z` per mode. Rows `m+2..n` of `A_J` are exactly zero; the
/// integrators rely on that structure.
#[derive(Debug, Clone)]
pub struct LinearCascade {
    diffusion: DMatrix<f64>,
    coupling: DMatrix<f64>,
    m: usize,
}

impl LinearCascade {
    pub fn new(
        diffusion: DMatrix<f64>,
        coupling: DMatrix<f64>,
        m: usize,
    ) -> Result<Self, TransformError> {
        let n = diffusion.nrows();
        assert_eq!(diffusion.ncols(), n, "diffusion block must be square");
        assert_eq!(coupling.nrows(), n, "coupling block must match");
        assert_eq!(coupling.ncols(), n, "coupling block must match");
        assert!(m >= 1 && m <= n, "controlled count out of range");
        for i in m + 1..n {
            if coupling.row(i).iter().any(|&v| v != 0.0) {
                return Err(TransformError::AssumptionViolation(format!(
                    "coupling row {i} must vanish in cascade form"
                )));
            }
        }
        Ok(Self { diffusion, coupling, m })
    }

    pub fn species_count(&self) -> usize {
        self.diffusion.nrows()
    }

    pub fn control_count(&self) -> usize {
        self.m
    }

    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.diffusion
    }

    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    /// Generator of mode k: `-lambda D_J + A_J`.
    pub fn mode_matrix(&self, lambda: f64) -> DMatrix<f64> {
        &self.diffusion * (-lambda) + &self.coupling
    }
}

/// The full nonlinear change of variables `z = P (u - u*)` together with the
/// cascade matrices it produces.
#[derive(Debug, Clone)]
pub struct CascadeTransform {
    p: DMatrix<f64>,
    p_inv: DMatrix<f64>,
    cascade: LinearCascade,
    u_star: Vec<f64>,
    nu: Vec<f64>,
    degree: u32,
}

/// Relative diffusivity separation below which the transform is refused.
const SEPARATION_FLOOR: f64 = 1e-8;
/// Coupling magnitude below which the controllability pivot is refused.
const PIVOT_FLOOR: f64 = 1e-12;

impl CascadeTransform {
    pub fn new(net: &ReactionNetwork, s: &StationaryState) -> Result<Self, TransformError> {
        let n = net.species_count();
        let m = net.control_count();
        let d = net.diffusivities();

        // pairwise-separated diffusivities on the uncontrolled block
        let scale = d.iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1.0);
        for k in m..n {
            for l in k + 1..n {
                if (d[k] - d[l]).abs() < SEPARATION_FLOOR * scale {
                    return Err(TransformError::AssumptionViolation(format!(
                        "diffusivities of uncontrolled species {} and {} coincide \
                         (d = {} vs {})",
                        k + 1,
                        l + 1,
                        d[k],
                        d[l]
                    )));
                }
            }
        }

        let nu: Vec<f64> = (0..n).map(|i| net.net_stoichiometry(i)).collect();
        let mut p = DMatrix::zeros(n, n);
        for i in 0..m {
            p[(i, i)] = 1.0;
        }
        for i in m..n {
            for j in m..=i {
                let mut denom = nu[j];
                for r in m..=i {
                    if r != j {
                        denom *= d[j] - d[r];
                    }
                }
                p[(i, j)] = 1.0 / denom;
            }
        }
        let p_inv = p
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| TransformError::ZeroDenominator("transform not invertible".into()))?;

        let mut diffusion = DMatrix::zeros(n, n);
        for i in 0..n {
            diffusion[(i, i)] = d[i];
        }
        for i in m + 1..n {
            diffusion[(i, i - 1)] = 1.0;
        }

        // coupling rows: the first m rows of grad F . P^{-1}, then the common
        // factor gradient, then exact zeros (the column identity).
        let jac = rate_jacobian(net, s.concentrations());
        let grad_r = net.common_factor_gradient(s.concentrations());
        let mut coupling = DMatrix::zeros(n, n);
        let top = jac.rows(0, m) * &p_inv;
        coupling.rows_mut(0, m).copy_from(&top);
        let grad_row = DMatrix::from_row_slice(1, n, &grad_r) * &p_inv;
        coupling.row_mut(m).copy_from(&grad_row.row(0));

        let pivot = coupling[(m, m - 1)];
        let grad_scale = grad_r.iter().fold(0.0_f64, |a, &b| a.max(b.abs())).max(1.0);
        if pivot.abs() <= PIVOT_FLOOR * grad_scale {
            return Err(TransformError::AssumptionViolation(format!(
                "coupling pivot between species {m} and {} vanishes at the target state; \
                 try renumbering the controlled species",
                m + 1
            )));
        }

        let cascade = LinearCascade::new(diffusion, coupling, m)?;
        Ok(Self {
            p,
            p_inv,
            cascade,
            u_star: s.concentrations().to_vec(),
            nu,
            degree: net.total_degree(),
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn inverse_matrix(&self) -> &DMatrix<f64> {
        &self.p_inv
    }

    pub fn linear_cascade(&self) -> &LinearCascade {
        &self.cascade
    }

    pub fn target_state(&self) -> &[f64] {
        &self.u_star
    }

    /// Largest monomial degree of the nonlinearity (dealiasing parameter).
    pub fn degree(&self) -> u32 {
        self.degree
    }

    /// `||P|| * ||P^{-1}||` (Frobenius): a cheap conditioning proxy for the
    /// change of variables.
    pub fn condition_estimate(&self) -> f64 {
        self.p.norm() * self.p_inv.norm()
    }

    /// Numerical residuals of the two exact identities behind the transform:
    /// `(||P D - D_J P||_max, max_{k>=m+2} |sum_l P[k][l] nu_l|)`.
    pub fn residuals(&self, net: &ReactionNetwork) -> (f64, f64) {
        let n = net.species_count();
        let m = net.control_count();
        let mut d = DMatrix::zeros(n, n);
        for i in 0..n {
            d[(i, i)] = net.diffusivities()[i];
        }
        let commute = (&self.p * &d - self.cascade.diffusion() * &self.p).amax();
        let mut col_defect = 0.0_f64;
        for k in m + 1..n {
            let mut sum = 0.0;
            for l in m..n {
                sum += self.p[(k, l)] * self.nu[l];
            }
            col_defect = col_defect.max(sum.abs());
        }
        (commute, col_defect)
    }

    /// Transformed nonlinearity `G(z) = P F(P^{-1} z + u*)` evaluated through
    /// the common factor, so rows `m+2..n` are exactly zero:
    /// `G = (nu_1 R, ..., nu_m R, R, 0, ..., 0)`.
    pub fn transformed_nonlinearity(
        &self,
        net: &ReactionNetwork,
        s: &StationaryState,
        z: &[f64],
    ) -> Vec<f64> {
        let n = z.len();
        let m = net.control_count();
        let mut u = vec![0.0; n];
        for i in 0..n {
            let mut acc = s.concentrations()[i];
            for j in 0..n {
                acc += self.p_inv[(i, j)] * z[j];
            }
            u[i] = acc;
        }
        let r = net.common_factor(&u);
        let mut g = vec![0.0; n];
        for (i, gi) in g.iter_mut().enumerate().take(m) {
            *gi = self.nu[i] * r;
        }
        g[m] = r;
        g
    }

    /// Remove the linear part: `Q(z) = G(z) - A_J z`, the quadratic-and-up
    /// remainder that drives the fixed-point scheme. Rows `m+2..n` stay
    /// exactly zero.
    pub fn nonlinear_remainder(
        &self,
        net: &ReactionNetwork,
        s: &StationaryState,
        z: &[f64],
    ) -> Vec<f64> {
        let mut g = self.transformed_nonlinearity(net, s, z);
        let a = self.cascade.coupling();
        for (i, gi) in g.iter_mut().enumerate().take(net.control_count() + 1) {
            let mut lin = 0.0;
            for (j, zj) in z.iter().enumerate() {
                lin += a[(i, j)] * zj;
            }
            *gi -= lin;
        }
        g
    }

    /// Fieldwise `z = P (u - u*)` (mode-by-mode linear map).
    pub fn to_z(&self, u: &SpectralField, dom: &SpectralDomain) -> SpectralField {
        let star =
            SpectralField::constant(&self.u_star, u.max_mode(), dom.length());
        SpectralField::from_coeffs(&self.p * (u.coeffs() - star.coeffs()))
    }

    /// Fieldwise `u = P^{-1} z + u*`.
    pub fn from_z(&self, z: &SpectralField, dom: &SpectralDomain) -> SpectralField {
        let star =
            SpectralField::constant(&self.u_star, z.max_mode(), dom.length());
        SpectralField::from_coeffs(&self.p_inv * z.coeffs() + star.coeffs())
    }
}

/// Diagnostic for the partial-fraction identity
/// `sum_i prod_{j != i} 1/(v_i - v_j) = 0` (any n >= 2 pairwise-distinct
/// values). Returns the floating-point sum, which should be tiny.
pub fn reciprocal_product_identity(values: &[f64]) -> Result<f64, TransformError> {
    let n = values.len();
    if n < 2 {
        return Err(TransformError::ZeroDenominator(
            "identity needs at least two values".into(),
        ));
    }
    let mut sum = 0.0;
    for i in 0..n {
        let mut term = 1.0;
        for j in 0..n {
            if i != j {
                let diff = values[i] - values[j];
                if diff == 0.0 {
                    return Err(TransformError::ZeroDenominator(format!(
                        "values {i} and {j} coincide"
                    )));
                }
                term /= diff;
            }
        }
        sum += term;
    }
    Ok(sum)
}
