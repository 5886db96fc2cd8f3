//! Random variate generation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, ChiSquared, Distribution, Gamma, StandardNormal};

use crate::error::{KernelError, Result};
use crate::linalg::Spd;

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn std_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(dim, (0..dim).map(|_| std_normal(rng)))
}

pub fn sample_mvn<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &Spd, rng: &mut R) -> Result<DVector<f64>> {
    if mean.len() != cov.dim() {
        return Err(KernelError::DimensionMismatch {
            expected: cov.dim(),
            got: mean.len(),
        });
    }
    let z = std_normal_vector(mean.len(), rng);
    Ok(mean + cov.mul_factor(&z))
}

/// Inverse-Wishart draw with mean `scale / (df - d - 1)` when `df > d + 1`.
///
/// Uses the Bartlett decomposition: with `scale = U Uᵀ` and `A` the Bartlett
/// factor of a standard Wishart, `Σ = U A⁻ᵀ A⁻¹ Uᵀ`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(df: f64, scale: &Spd, rng: &mut R) -> Result<Spd> {
    let d = scale.dim();
    if !(df > d as f64 - 1.0) || !df.is_finite() {
        return Err(KernelError::InvalidParameter(format!(
            "inverse-Wishart degrees of freedom {df} must exceed {}",
            d as f64 - 1.0
        )));
    }
    let mut a = DMatrix::<f64>::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(df - i as f64)
            .map_err(|e| KernelError::InvalidParameter(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = std_normal(rng);
        }
    }
    let u = scale.factor();
    // Solve A M = Uᵀ, then Σ = Mᵀ M.
    let m = a
        .solve_lower_triangular(&u.transpose())
        .ok_or(KernelError::NotPositiveDefinite("bartlett factor"))?;
    let sigma = m.transpose() * &m;
    Spd::new(symmetrize(sigma))
}

pub fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(KernelError::InvalidParameter("empty Dirichlet parameter".into()));
    }
    if let Some(a) = alpha.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
        return Err(KernelError::InvalidParameter(format!(
            "Dirichlet concentration {a} must be positive"
        )));
    }
    if alpha.len() == 1 {
        return Ok(vec![1.0]);
    }
    let mut draws = Vec::with_capacity(alpha.len());
    for &a in alpha {
        let g = Gamma::new(a, 1.0).map_err(|e| KernelError::InvalidParameter(e.to_string()))?;
        draws.push(g.sample(rng));
    }
    let total: f64 = draws.iter().sum();
    if !(total > 0.0) {
        return Err(KernelError::InvalidParameter(
            "Dirichlet draw underflowed".into(),
        ));
    }
    Ok(draws.into_iter().map(|g| g / total).collect())
}

/// Draws an index with probability proportional to `exp(log_weights)`.
pub fn sample_categorical_log<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|w| !w.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(KernelError::DegenerateCategorical);
    }
    let total: f64 = log_weights
        .iter()
        .map(|w| if w.is_nan() { 0.0 } else { (w - max).exp() })
        .sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (k, w) in log_weights.iter().enumerate() {
        if w.is_nan() {
            continue;
        }
        let p = (w - max).exp();
        if p > 0.0 {
            last = k;
        }
        if u < p {
            return Ok(k);
        }
        u -= p;
    }
    Ok(last)
}

/// Absolute value of a Cauchy(0, scale) draw.
pub fn sample_half_cauchy<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    scale * (std::f64::consts::FRAC_PI_2 * u).tan()
}

pub fn sample_uniform<R: Rng + ?Sized>(low: f64, high: f64, rng: &mut R) -> f64 {
    low + (high - low) * rng.random::<f64>()
}

/// LKJ(eta) correlation matrix by the onion method.
pub fn sample_lkj_corr<R: Rng + ?Sized>(dim: usize, eta: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(eta > 0.0) {
        return Err(KernelError::InvalidParameter(format!("LKJ eta {eta} must be positive")));
    }
    if dim == 0 {
        return Err(KernelError::InvalidParameter("LKJ dimension 0".into()));
    }
    let mut r = DMatrix::<f64>::identity(dim, dim);
    if dim == 1 {
        return Ok(r);
    }
    let mut beta = eta + (dim as f64 - 2.0) / 2.0;
    let b = Beta::new(beta, beta).map_err(|e| KernelError::InvalidParameter(e.to_string()))?;
    let r12 = 2.0 * b.sample(rng) - 1.0;
    r[(0, 1)] = r12;
    r[(1, 0)] = r12;
    for k in 2..dim {
        beta -= 0.5;
        let y = Beta::new(k as f64 / 2.0, beta)
            .map_err(|e| KernelError::InvalidParameter(e.to_string()))?
            .sample(rng);
        let u = std_normal_vector(k, rng);
        let u = &u / u.norm();
        let w = u * y.sqrt();
        let top = r.view((0, 0), (k, k)).into_owned();
        let a = top
            .cholesky()
            .ok_or(KernelError::NotPositiveDefinite("onion step"))?
            .l();
        let z = a * w;
        for i in 0..k {
            r[(i, k)] = z[i];
            r[(k, i)] = z[i];
        }
    }
    Ok(r)
}
