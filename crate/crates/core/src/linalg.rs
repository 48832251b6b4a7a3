//! Small dense helpers shared by the kernel, objective and engine code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    pub fn new(a: &Mat, what: &str) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::arg(format!("{what}: matrix is not square")));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::num(format!("{what}: non-finite entries")));
        }
        Cholesky::new(a.clone())
            .map(|chol| SpdFactor { chol })
            .ok_or_else(|| Error::num(format!("{what}: matrix is not positive definite")))
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// Squared ratio of the largest to smallest Cholesky pivot, a cheap
    /// lower estimate of the spectral condition number.
    pub fn condition_estimate(&self) -> f64 {
        let l = self.chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..l.nrows() {
            lo = lo.min(l[(i, i)]);
            hi = hi.max(l[(i, i)]);
        }
        (hi / lo).powi(2)
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &Mat) -> Mat {
        self.chol.solve(b)
    }

    /// A⁻¹ assembled from the factor.
    pub fn inverse(&self) -> Mat {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

pub fn symmetrize(a: &mut Mat) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn max_asymmetry(a: &Mat) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

const JACOBI_MAX_SWEEPS: usize = 64;

/// Unsorted eigendecomposition of the symmetric part of `a` by cyclic
/// Jacobi rotations.
///
/// nalgebra's QR iteration deflates trailing 2×2 blocks with a closed form
/// that cancels badly when two eigenvalues are close, leaving reconstruction
/// errors near 1e-9 on ordinary 3×3 inputs. Jacobi keeps them at roundoff.
/// Its O(n³) sweeps are meant for the small matrices it is used on.
pub fn sym_eigen(a: &Mat) -> SymmetricEigen<f64, Dyn> {
    let n = a.nrows();
    let mut s = a.clone();
    symmetrize(&mut s);
    let mut v = Mat::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (s[(p, p)], s[(q, q)]);
                let g = 100.0 * apq.abs();
                if app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    s[(p, q)] = 0.0;
                    s[(q, p)] = 0.0;
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 { 1.0 } else { -1.0 } / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let sn = t * c;
                for k in 0..n {
                    let (kp, kq) = (s[(k, p)], s[(k, q)]);
                    s[(k, p)] = c * kp - sn * kq;
                    s[(k, q)] = sn * kp + c * kq;
                }
                for k in 0..n {
                    let (pk, qk) = (s[(p, k)], s[(q, k)]);
                    s[(p, k)] = c * pk - sn * qk;
                    s[(q, k)] = sn * pk + c * qk;
                }
                s[(p, q)] = 0.0;
                s[(q, p)] = 0.0;
                for k in 0..n {
                    let (kp, kq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * kp - sn * kq;
                    v[(k, q)] = sn * kp + c * kq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    SymmetricEigen { eigenvalues: s.diagonal(), eigenvectors: v }
}

/// Rebuilds Q diag(λ) Qᵀ after mapping every eigenvalue through `f`.
pub fn map_eigenvalues(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    let eig = sym_eigen(a);
    let q = &eig.eigenvectors;
    let lam = eig.eigenvalues.map(f);
    let mut out = q * Mat::from_diagonal(&lam) * q.transpose();
    symmetrize(&mut out);
    out
}

/// Projection onto the PSD cone: negative eigenvalues clipped to zero.
/// Applied to m × m matrices every iteration, so it uses nalgebra's faster
/// QR iteration; only the sign of the spectrum matters here.
pub fn clip_psd(a: &Mat) -> Mat {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let q = &eig.eigenvectors;
    let mut out = q * Mat::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0))) * q.transpose();
    symmetrize(&mut out);
    out
}

/// Frobenius inner product ⟨a, b⟩ = tr(aᵀb).
pub fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// tr(a b) for square matrices without forming the product.
pub fn trace_of_product(a: &Mat, b: &Mat) -> f64 {
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn all_finite(a: &Mat) -> bool {
    a.iter().all(|v| v.is_finite())
}
