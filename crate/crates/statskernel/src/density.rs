//! Log-density evaluators and a few numerically careful scalar helpers.

use nalgebra::{DMatrix, DVector};

use crate::linalg::Spd;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (LN_2PI + z * z) - sd.ln()
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &Spd) -> f64 {
    let r = x - mean;
    -0.5 * (x.len() as f64 * LN_2PI + cov.log_det() + cov.inv_quad_form(&r))
}

/// Density of |X| for X ~ Cauchy(0, scale); `-inf` for negative input.
pub fn half_cauchy_logpdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let z = x / scale;
    (2.0 / std::f64::consts::PI).ln() - scale.ln() - z.mul_add(z, 1.0).ln()
}

/// Unnormalized LKJ(eta) log density: `(eta - 1) log det R`.
pub fn lkj_corr_log_kernel(r: &DMatrix<f64>, eta: f64) -> f64 {
    if eta == 1.0 {
        return 0.0;
    }
    match r.clone().cholesky() {
        Some(c) => {
            let l = c.l();
            let log_det: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
            (eta - 1.0) * log_det
        }
        None => f64::NEG_INFINITY,
    }
}

/// Exact LKJ(eta) log density of the single correlation of a 2×2 matrix:
/// `(rho + 1) / 2 ~ Beta(eta, eta)`.
pub fn lkj2_logpdf(rho: f64, eta: f64) -> f64 {
    if !(rho > -1.0 && rho < 1.0) {
        return f64::NEG_INFINITY;
    }
    let log_beta = 2.0 * libm::lgamma(eta) - libm::lgamma(2.0 * eta);
    (eta - 1.0) * (1.0 - rho * rho).ln() - (2.0 * eta - 1.0) * std::f64::consts::LN_2 - log_beta
}

/// `log(1 + exp(x))` without overflow.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 35.0 {
        x
    } else if x < -35.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(logit⁻¹(x))`.
pub fn log_inv_logit(x: f64) -> f64 {
    -log1p_exp(-x)
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binomial log-likelihood kernel of `successes` out of `trials` at logit `eta`
/// (no binomial coefficient: the Bernoulli sequence is observed).
pub fn bernoulli_logit_loglik(successes: f64, trials: f64, eta: f64) -> f64 {
    successes * log_inv_logit(eta) + (trials - successes) * log_inv_logit(-eta)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
