//! Mass-action reaction networks: rates, linearizations, stationary states,
//! structural assumptions and the conserved mass functionals.
//!
//! A single reversible reaction `alpha_1 U_1 + ... <-> beta_1 U_1 + ...`
//! drives every species through the common factor
//!
//! ```text
//! R(u) = prod_k u_k^{alpha_k} - prod_k u_k^{beta_k},
//! f_i(u) = (beta_i - alpha_i) R(u),
//! ```
//!
//! so the rate vector is always a scalar multiple of `beta - alpha`. Controls
//! act on the first `m` species (the controlled set is `{1..m}` once the
//! network is renumbered, see [`renumber_for_witness`]).

use crate::spectral::SpectralField;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("species {0}: alpha and beta coincide (every species needs alpha_i != beta_i)")]
    EqualExponents(usize),
    #[error("control count must satisfy 1 <= m < n, got m={m}, n={n}")]
    InvalidControlCount { m: usize, n: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    ShapeMismatch { what: &'static str, expected: usize, got: usize },
    #[error("diffusivity of species {0} must be positive, got {1}")]
    NonpositiveDiffusivity(usize, f64),
    #[error("state is not stationary: |prod u^alpha - prod u^beta| = {residual:.3e} > 1e-12")]
    NotStationary { residual: f64 },
    #[error("stationary state must be nonnegative; component {0} is {1}")]
    NegativeConcentration(usize, f64),
}

/// One reversible mass-action reaction with per-species Fick diffusion.
///
/// Species are 0-indexed internally; the controlled set is `0..m`.
#[derive(Debug, Clone)]
pub struct ReactionNetwork {
    n: usize,
    m: usize,
    alpha: Vec<u32>,
    beta: Vec<u32>,
    d: Vec<f64>,
}

impl ReactionNetwork {
    pub fn new(m: usize, alpha: Vec<u32>, beta: Vec<u32>, d: Vec<f64>) -> Result<Self, NetworkError> {
        let n = alpha.len();
        if beta.len() != n {
            return Err(NetworkError::ShapeMismatch { what: "beta", expected: n, got: beta.len() });
        }
        if d.len() != n {
            return Err(NetworkError::ShapeMismatch { what: "d", expected: n, got: d.len() });
        }
        if m == 0 || m >= n {
            return Err(NetworkError::InvalidControlCount { m, n });
        }
        for i in 0..n {
            if alpha[i] == beta[i] {
                return Err(NetworkError::EqualExponents(i));
            }
            if d[i] <= 0.0 || !d[i].is_finite() {
                return Err(NetworkError::NonpositiveDiffusivity(i, d[i]));
            }
        }
        Ok(Self { n, m, alpha, beta, d })
    }

    /// The four-species demo network `U1 + U3 <-> U2 + U4` with two controls,
    /// used throughout the test suite.
    pub fn demo_quartet() -> Self {
        Self::new(2, vec![1, 0, 1, 0], vec![0, 1, 0, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    pub fn species_count(&self) -> usize {
        self.n
    }

    pub fn control_count(&self) -> usize {
        self.m
    }

    pub fn alpha(&self) -> &[u32] {
        &self.alpha
    }

    pub fn beta(&self) -> &[u32] {
        &self.beta
    }

    pub fn diffusivities(&self) -> &[f64] {
        &self.d
    }

    /// `beta_i - alpha_i` as a signed float (never zero by construction).
    pub fn net_stoichiometry(&self, i: usize) -> f64 {
        self.beta[i] as f64 - self.alpha[i] as f64
    }

    /// Max total degree of the two monomials; degree bound for dealiasing.
    pub fn total_degree(&self) -> u32 {
        let sa: u32 = self.alpha.iter().sum();
        let sb: u32 = self.beta.iter().sum();
        sa.max(sb)
    }

    /// Common factor `R(u) = prod u^alpha - prod u^beta`.
    pub fn common_factor(&self, u: &[f64]) -> f64 {
        monomial(u, &self.alpha) - monomial(u, &self.beta)
    }

    /// Gradient of the common factor, with the symbolic convention that a
    /// zero exponent contributes zero even at `u_j = 0`.
    pub fn common_factor_gradient(&self, u: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|j| monomial_partial(u, &self.alpha, j) - monomial_partial(u, &self.beta, j))
            .collect()
    }
}

/// Constant stationary concentration vector: `prod u^alpha = prod u^beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryState {
    u_star: Vec<f64>,
}

impl StationaryState {
    pub fn new(net: &ReactionNetwork, u_star: Vec<f64>) -> Result<Self, NetworkError> {
        if u_star.len() != net.n {
            return Err(NetworkError::ShapeMismatch {
                what: "u_star",
                expected: net.n,
                got: u_star.len(),
            });
        }
        for (i, &v) in u_star.iter().enumerate() {
            if v < 0.0 || !v.is_finite() {
                return Err(NetworkError::NegativeConcentration(i, v));
            }
        }
        let residual = net.common_factor(&u_star).abs();
        if residual > 1e-12 {
            return Err(NetworkError::NotStationary { residual });
        }
        Ok(Self { u_star })
    }

    pub fn concentrations(&self) -> &[f64] {
        &self.u_star
    }
}

fn monomial(u: &[f64], e: &[u32]) -> f64 {
    u.iter().zip(e).fold(1.0, |acc, (&ui, &ei)| acc * ui.powi(ei as i32))
}

/// d/du_j of `prod u^e`: `e_j u_j^{e_j - 1} prod_{k != j} u_k^{e_k}`,
/// identically zero when `e_j = 0` (even at `u_j = 0`).
fn monomial_partial(u: &[f64], e: &[u32], j: usize) -> f64 {
    if e[j] == 0 {
        return 0.0;
    }
    let mut acc = e[j] as f64 * u[j].powi(e[j] as i32 - 1);
    for (k, (&uk, &ek)) in u.iter().zip(e).enumerate() {
        if k != j {
            acc *= uk.powi(ek as i32);
        }
    }
    acc
}

/// Rate vector `f_i(u) = (beta_i - alpha_i) R(u)`.
pub fn reaction_rate(net: &ReactionNetwork, u: &[f64]) -> Vec<f64> {
    let r = net.common_factor(u);
    (0..net.n).map(|i| net.net_stoichiometry(i) * r).collect()
}

/// Analytic Jacobian `(i,j) -> d f_i / d u_j`.
pub fn rate_jacobian(net: &ReactionNetwork, u: &[f64]) -> DMatrix<f64> {
    let grad = net.common_factor_gradient(u);
    DMatrix::from_fn(net.n, net.n, |i, j| net.net_stoichiometry(i) * grad[j])
}

/// Grid-seeded damped (Gauss-Newton) root search for `R(u) = 0` inside a box.
///
/// Every returned state satisfies `|R| <= 1e-12`; results are deduplicated
/// within sup-distance 1e-8. An empty result is not an error.
pub fn find_constant_stationary_states(
    net: &ReactionNetwork,
    box_bounds: &[(f64, f64)],
    grid_density: usize,
) -> Result<Vec<StationaryState>, NetworkError> {
    if box_bounds.len() != net.n {
        return Err(NetworkError::ShapeMismatch {
            what: "box bounds",
            expected: net.n,
            got: box_bounds.len(),
        });
    }
    let g = grid_density.max(2);
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut seed = vec![0usize; net.n];
    'seeds: loop {
        let mut u: Vec<f64> = (0..net.n)
            .map(|i| {
                let (lo, hi) = box_bounds[i];
                lo + (hi - lo) * seed[i] as f64 / (g - 1) as f64
            })
            .collect();
        // damped Gauss-Newton on the scalar residual, clamped to the box
        for _ in 0..60 {
            let r = net.common_factor(&u);
            if r.abs() <= 1e-13 {
                break;
            }
            let grad = net.common_factor_gradient(&u);
            let gnorm2: f64 = grad.iter().map(|x| x * x).sum();
            if gnorm2 < 1e-30 {
                break;
            }
            let mut step = 1.0;
            let base = r.abs();
            loop {
                let trial: Vec<f64> = u
                    .iter()
                    .zip(&grad)
                    .enumerate()
                    .map(|(i, (&ui, &gi))| {
                        let (lo, hi) = box_bounds[i];
                        (ui - step * r * gi / gnorm2).clamp(lo, hi)
                    })
                    .collect();
                if net.common_factor(&trial).abs() < base || step < 1e-6 {
                    u = trial;
                    break;
                }
                step *= 0.5;
            }
        }
        if net.common_factor(&u).abs() <= 1e-12
            && !found.iter().any(|v| sup_distance(v, &u) <= 1e-8)
        {
            found.push(u);
        }
        // advance the mixed-radix seed counter
        let mut axis = 0;
        loop {
            if axis == net.n {
                break 'seeds;
            }
            seed[axis] += 1;
            if seed[axis] < g {
                break;
            }
            seed[axis] = 0;
            axis += 1;
        }
    }
    found
        .into_iter()
        .map(|u| StationaryState::new(net, u.iter().map(|&x| x.max(0.0)).collect()))
        .collect()
}

fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Structural assumptions for the cascade construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    /// Diffusivities of uncontrolled species pairwise distinct.
    pub assumption1: bool,
    /// Some controlled species couples into species m+1 at `u*`.
    pub assumption2: bool,
    /// Largest-magnitude witness column (0-based, < m) when assumption2 holds.
    pub witness_j: Option<usize>,
}

pub fn check_assumptions(net: &ReactionNetwork, s: &StationaryState) -> AssumptionReport {
    let d = net.diffusivities();
    let mut assumption1 = true;
    for k in net.m..net.n {
        for l in (k + 1)..net.n {
            if d[k] == d[l] {
                assumption1 = false;
            }
        }
    }
    // row m (0-based) of the Jacobian is d f_{m+1} in 1-based species labels
    let jac = rate_jacobian(net, s.concentrations());
    let mut witness = None;
    let mut best = 1e-12;
    for j in 0..net.m {
        let mag = jac[(net.m, j)].abs();
        if mag > best || (witness.is_some() && mag == best) {
            best = mag;
            witness = Some(j);
        }
    }
    AssumptionReport { assumption1, assumption2: witness.is_some(), witness_j: witness }
}

/// Conserved-mass differences `Delta_k` for `k = m+2..n` (1-based): the
/// integrals `int (u_k - u_k*)/(beta_k - alpha_k)` minus the same quantity
/// for species `m+1`, read off the mode-0 coefficients.
pub fn invariant_functionals(
    net: &ReactionNetwork,
    s: &StationaryState,
    u_field: &SpectralField,
    domain_length: f64,
) -> Vec<f64> {
    let sqrt_l = domain_length.sqrt();
    let mass = |i: usize| {
        let integral = u_field.coeffs()[(i, 0)] * sqrt_l - s.concentrations()[i] * domain_length;
        integral / net.net_stoichiometry(i)
    };
    let reference = mass(net.m);
    (net.m + 1..net.n).map(|k| mass(k) - reference).collect()
}

/// Swap controlled species so the assumption-2 witness sits at position m
/// (the cascade construction divides by that coupling entry). Returns the
/// relabeled network/state and the permutation `new index -> old index`.
pub fn renumber_for_witness(
    net: &ReactionNetwork,
    s: &StationaryState,
) -> Option<(ReactionNetwork, StationaryState, Vec<usize>)> {
    let report = check_assumptions(net, s);
    let j = report.witness_j?;
    let mut perm: Vec<usize> = (0..net.n).collect();
    perm.swap(j, net.m - 1);
    let permute_u32 = |v: &[u32]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let permute_f64 = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let net2 = ReactionNetwork::new(
        net.m,
        permute_u32(net.alpha()),
        permute_u32(net.beta()),
        permute_f64(net.diffusivities()),
    )
    .expect("permutation preserves validity");
    let s2 = StationaryState::new(&net2, permute_f64(s.concentrations()))
        .expect("permutation preserves stationarity");
    Some((net2, s2, perm))
}
