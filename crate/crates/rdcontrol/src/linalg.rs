//! Dense linear-algebra helpers shared by the integrators and controllers:
//! matrix exponentials with phi-function families and rank-revealing
//! least-norm solves.
//!
//! The phi functions are
//!
//! ```text
//! phi_0(z) = e^z,   phi_k(z) = sum_{j>=0} z^j / (j+k)!
//! ```
//!
//! and satisfy `int_0^h exp(A(h-s)) s^j ds = j! h^{j+1} phi_{j+1}(hA)`, which
//! is what exact polynomial-input stepping of `z' = Az + P(s)` needs. The
//! whole family `[e^{hA}, phi_1(hA), ..., phi_p(hA)]` comes out of a single
//! exponential of the Van Loan block matrix
//!
//! ```text
//! [ hA  I        ]
//! [     0  I     ]
//! [        ...  I]
//! [            0 ]
//! ```
//!
//! whose top row of blocks after exponentiation is exactly the family.

use nalgebra::{DMatrix, DVector};

/// `[e^{hA}, phi_1(hA), ..., phi_p(hA)]` via one block exponential.
pub fn phi_stack(a: &DMatrix<f64>, h: f64, p: usize) -> Vec<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "phi_stack needs a square matrix");
    if p == 0 {
        return vec![(a * h).exp()];
    }
    let size = n * (p + 1);
    let mut big = DMatrix::<f64>::zeros(size, size);
    big.view_mut((0, 0), (n, n)).copy_from(&(a * h));
    for b in 0..p {
        for i in 0..n {
            big[(b * n + i, (b + 1) * n + i)] = 1.0;
        }
    }
    let e = big.exp();
    (0..=p).map(|k| e.view((0, k * n), (n, n)).into_owned()).collect()
}

/// Monomial coefficients (in the normalized variable `sigma = s/h` on [0,1])
/// of the cubic through samples at `sigma = 0, 1/3, 2/3, 1`.
pub fn cubic_through_thirds(f: [&DVector<f64>; 4]) -> [DVector<f64>; 4] {
    let a0 = f[0].clone();
    let a1 = (f[0] * -11.0 + f[1] * 18.0 - f[2] * 9.0 + f[3] * 2.0) / 2.0;
    let a2 = (f[0] * 18.0 - f[1] * 45.0 + f[2] * 36.0 - f[3] * 9.0) / 2.0;
    let a3 = (f[0] * -9.0 + f[1] * 27.0 - f[2] * 27.0 + f[3] * 9.0) / 2.0;
    [a0, a1, a2, a3]
}

/// Advance `z' = Az + P(s)` over one step of length `h`, where `stack` is
/// `phi_stack(A, h, >= deg+1)` and `coeffs` are monomial coefficients of the
/// input polynomial in the normalized variable `sigma = s/h`.
pub fn step_polynomial_input(
    stack: &[DMatrix<f64>],
    h: f64,
    z: &DVector<f64>,
    coeffs: &[DVector<f64>],
) -> DVector<f64> {
    let mut out = &stack[0] * z;
    let mut factorial = 1.0;
    for (j, c) in coeffs.iter().enumerate() {
        if j > 0 {
            factorial *= j as f64;
        }
        out += &stack[j + 1] * c * (factorial * h);
    }
    out
}

/// One-sided Jacobi orthogonalization of the columns of a tall matrix:
/// returns `(w, v, sigma)` with `a = w v^T`, the columns of `w` mutually
/// orthogonal with norms `sigma`, and `v` orthogonal. Chosen over the
/// built-in bidiagonalization SVD because the latter loses ~9 digits of
/// factorization accuracy on the ill-conditioned input maps assembled here,
/// while Jacobi retains high relative accuracy per column.
fn jacobi_orthogonalize(mut w: DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let k = w.ncols();
    let mut v = DMatrix::<f64>::identity(k, k);
    let tol = 1e-15;
    for _sweep in 0..40 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let app = w.column(p).norm_squared();
                let aqq = w.column(q).norm_squared();
                let apq = w.column(p).dot(&w.column(q));
                if apq.abs() <= tol * (app * aqq).sqrt() || app * aqq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for r in 0..w.nrows() {
                    let (wp, wq) = (w[(r, p)], w[(r, q)]);
                    w[(r, p)] = cs * wp - sn * wq;
                    w[(r, q)] = sn * wp + cs * wq;
                }
                for r in 0..k {
                    let (vp, vq) = (v[(r, p)], v[(r, q)]);
                    v[(r, p)] = cs * vp - sn * vq;
                    v[(r, q)] = sn * vp + cs * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma = DVector::from_iterator(k, (0..k).map(|j| w.column(j).norm()));
    (w, v, sigma)
}

/// Minimal-norm least-squares solution of `G x = b` by SVD with relative
/// singular-value cutoff. Returns `(x, numerical_rank, sigma_max)`.
pub fn least_norm_solve(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    rel_cutoff: f64,
) -> (DVector<f64>, usize, f64) {
    let fat = g.nrows() <= g.ncols();
    let a = if fat { g.transpose() } else { g.clone() };
    let (w, v, sigma) = jacobi_orthogonalize(a);
    let sigma_max = sigma.max();
    let cutoff = rel_cutoff * sigma_max;
    let rank = sigma.iter().filter(|&&s| s > cutoff).count();
    // fat:  G   = v diag(sigma) u^T with u = w diag(1/sigma)
    // tall: G   = u diag(sigma) v^T
    // either way the pseudo-inverse solution only needs w, v and sigma^2
    let proj = if fat { v.transpose() * b } else { w.transpose() * b };
    let mut x = DVector::zeros(g.ncols());
    for (i, &s) in sigma.iter().enumerate() {
        if s > cutoff {
            let coeff = proj[i] / (s * s);
            if fat {
                x.axpy(coeff, &w.column(i).clone_owned(), 1.0);
            } else {
                x.axpy(coeff, &v.column(i).clone_owned(), 1.0);
            }
        }
    }
    (x, rank, sigma_max)
}
