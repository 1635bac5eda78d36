//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Reciprocal condition of `GᵀG` below which a dictionary is rejected.
pub const RCOND_THRESHOLD: f64 = 1e-12;

/// Thin QR factorization of a full-column-rank matrix, used for the
/// pseudo-inverse and the orthogonal-complement projector.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    rcond: f64,
}

impl LeastSquares {
    pub fn new(g: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = g.shape();
        if m == 0 || n <= m {
            return Err(Error::dimension(format!(
                "least squares needs N > M >= 1, got {n}x{m}"
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("dictionary entries".into()));
        }
        let qr = g.clone().qr();
        let q = qr.q();
        let r = qr.r();
        let sv = r.singular_values();
        let smax = sv.max();
        let smin = sv.min();
        let rcond = if smax > 0.0 { (smin / smax).powi(2) } else { 0.0 };
        if !(rcond >= RCOND_THRESHOLD) {
            return Err(Error::Conditioning { rcond });
        }
        Ok(LeastSquares { q, r, rcond })
    }

    /// Reciprocal condition number of `GᵀG`.
    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    pub fn nrows(&self) -> usize {
        self.q.nrows()
    }

    /// `G⁺x`.
    pub fn solve(&self, x: &DVector<f64>) -> DVector<f64> {
        let qtx = self.q.tr_mul(x);
        self.r
            .solve_upper_triangular(&qtx)
            .expect("R is non-singular after the condition check")
    }

    /// `P⊥x = x − G G⁺ x`.
    pub fn project_complement(&self, x: &DVector<f64>) -> DVector<f64> {
        let qtx = self.q.tr_mul(x);
        x - &self.q * qtx
    }

    /// `G⁺ = R⁻¹Qᵀ`.
    pub fn pseudo_inverse(&self) -> DMatrix<f64> {
        let qt = self.q.transpose();
        self.r
            .solve_upper_triangular(&qt)
            .expect("R is non-singular after the condition check")
    }

    /// `(GᵀG)⁻¹ = R⁻¹R⁻ᵀ`.
    pub fn gram_inverse(&self) -> DMatrix<f64> {
        let m = self.r.ncols();
        let rinv = self
            .r
            .solve_upper_triangular(&DMatrix::identity(m, m))
            .expect("R is non-singular after the condition check");
        &rinv * rinv.transpose()
    }
}

/// Moore–Penrose pseudo-inverse of a full-column-rank matrix.
pub fn pseudo_inverse(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(LeastSquares::new(g)?.pseudo_inverse())
}

/// `x − G(G⁺x)`, orthogonal to every column of `G`.
pub fn project_complement(g: &DMatrix<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
    if g.nrows() != x.len() {
        return Err(Error::dimension(format!(
            "G has {} rows but x has {} entries",
            g.nrows(),
            x.len()
        )));
    }
    Ok(LeastSquares::new(g)?.project_complement(x))
}

fn symmetrized(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `a`, ascending.
pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    assert!(a.is_square(), "eigenvalues need a square matrix");
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<f64> = symmetrized(a).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| x.total_cmp(y));
    ev
}

/// Smallest eigenvalue of the symmetric part of `a`.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).first().copied().unwrap_or(f64::NAN)
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a).last().copied().unwrap_or(f64::NAN)
}

/// Largest eigenvalue magnitude of the symmetric part of `a`.
pub fn spectral_radius_sym(a: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(a)
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Spectral norm `‖A‖₂`, via the smaller of the two Gram matrices.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let gram = if a.nrows() >= a.ncols() {
        a.tr_mul(a)
    } else {
        a * a.transpose()
    };
    max_eigenvalue(&gram).max(0.0).sqrt()
}
