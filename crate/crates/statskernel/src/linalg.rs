//! Dense linear algebra on small matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{KernelError, Result};

/// A symmetric positive definite matrix held through its lower Cholesky factor.
#[derive(Debug, Clone)]
pub struct Spd {
    chol: Cholesky<f64, Dyn>,
}

impl Spd {
    /// Factorizes `m`. The upper triangle is ignored beyond a symmetry check.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(KernelError::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                    return Err(KernelError::NotPositiveDefinite("asymmetric input"));
                }
            }
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NotPositiveDefinite("non-finite entry"));
        }
        Cholesky::new(m)
            .map(|chol| Self { chol })
            .ok_or(KernelError::NotPositiveDefinite("cholesky failed"))
    }

    pub fn from_lower_factor(l: DMatrix<f64>) -> Result<Self> {
        if l.nrows() != l.ncols() {
            return Err(KernelError::DimensionMismatch {
                expected: l.nrows(),
                got: l.ncols(),
            });
        }
        if (0..l.nrows()).any(|i| !(l[(i, i)] > 0.0) || !l[(i, i)].is_finite()) {
            return Err(KernelError::NotPositiveDefinite("factor diagonal"));
        }
        let lower = l.lower_triangle();
        Ok(Self {
            chol: Cholesky::pack_dirty(lower),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, variance: f64) -> Self {
        let l = DMatrix::from_diagonal_element(dim, dim, variance.sqrt());
        Self {
            chol: Cholesky::pack_dirty(l),
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Lower Cholesky factor `L` with `L Lᵀ` equal to the matrix.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `xᵀ Σ⁻¹ x`.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> f64 {
        let l = self.chol.l();
        let z = l
            .solve_lower_triangular(x)
            .expect("cholesky factor has positive diagonal");
        z.norm_squared()
    }

    /// `L z`, the map from standard normal to N(0, Σ).
    pub fn mul_factor(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l() * z
    }
}

/// Ordinary least squares fit with classical standard errors.
#[derive(Debug, Clone)]
pub struct OlsFit {
    pub coefficients: DVector<f64>,
    pub std_errors: DVector<f64>,
    pub residuals: DVector<f64>,
    /// Residual variance on `n - p` degrees of freedom.
    pub sigma_sq: f64,
    pub df: usize,
}

/// Least squares through a column-scaled QR decomposition, so that badly
/// scaled designs such as raw cubic age polynomials stay well conditioned.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(KernelError::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if n < p || p == 0 {
        return Err(KernelError::RankDeficient(format!(
            "{n} observations for {p} coefficients"
        )));
    }
    let scales: Vec<f64> = (0..p)
        .map(|j| x.column(j).amax())
        .map(|s| if s > 0.0 { s } else { 1.0 })
        .collect();
    let mut xs = x.clone();
    for (j, s) in scales.iter().enumerate() {
        xs.column_mut(j).scale_mut(1.0 / s);
    }
    let qr = xs.qr();
    let r = qr.r();
    let rmax = (0..p).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..p).any(|i| r[(i, i)].abs() <= 1e-10 * rmax) {
        return Err(KernelError::RankDeficient(
            "columns are linearly dependent".into(),
        ));
    }
    let qty = qr.q().transpose() * y;
    let scaled = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| KernelError::RankDeficient("singular R".into()))?;
    let coefficients = DVector::from_iterator(p, (0..p).map(|j| scaled[j] / scales[j]));
    let residuals = y - x * &coefficients;
    let df = n - p;
    let sigma_sq = if df > 0 {
        residuals.norm_squared() / df as f64
    } else {
        0.0
    };
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| KernelError::RankDeficient("singular R".into()))?;
    let std_errors = DVector::from_iterator(
        p,
        (0..p).map(|j| (sigma_sq * r_inv.row(j).norm_squared()).sqrt() / scales[j]),
    );
    Ok(OlsFit {
        coefficients,
        std_errors,
        residuals,
        sigma_sq,
        df,
    })
}
