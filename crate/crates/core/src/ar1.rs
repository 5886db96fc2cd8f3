//! AR(1) covariance over irregularly spaced days.
//!
//! For observed day indices `d_1 < … < d_m` the process is Markov, so with
//! `ρ_k = φ^{d_k − d_{k−1}}` the precision has the sequential form
//! `xᵀΣ⁻¹y = Σ_k e_k(x) e_k(y)` where `e_1(x) = x_1/ξ` and
//! `e_k(x) = (x_k − ρ_k x_{k−1}) / (ξ √(1 − ρ_k²))`. Everything the samplers
//! need reduces to the three scalars below plus the log determinant.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `s = 1ᵀΣ⁻¹1`, `u = 1ᵀΣ⁻¹w`, `q = wᵀΣ⁻¹w` and `log det Σ` for one
/// participant's positive days.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Ar1Stats {
    pub m: usize,
    pub s: f64,
    pub u: f64,
    pub q: f64,
    pub log_det: f64,
}

impl Ar1Stats {
    /// Gaussian log density of `w` with constant mean `mu`.
    pub fn loglik(&self, mu: f64) -> f64 {
        if self.m == 0 {
            return 0.0;
        }
        -0.5 * (self.m as f64 * statskernel::density::LN_2PI + self.log_det + self.q - 2.0 * mu * self.u
            + mu * mu * self.s)
    }
}

fn check_days(days: &[u8]) -> Result<()> {
    if days.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data(format!(
            "observed day indices {days:?} are not strictly increasing"
        )));
    }
    Ok(())
}

/// Sufficient statistics of `w` observed on `days` under variance `xi_sq`
/// and autocorrelation `phi`.
pub fn ar1_stats(w: &[f64], days: &[u8], xi_sq: f64, phi: f64) -> Ar1Stats {
    debug_assert_eq!(w.len(), days.len());
    let m = w.len();
    if m == 0 {
        return Ar1Stats::default();
    }
    let mut st = Ar1Stats {
        m,
        s: 1.0,
        u: w[0],
        q: w[0] * w[0],
        log_det: 0.0,
    };
    for k in 1..m {
        let gap = i32::from(days[k]) - i32::from(days[k - 1]);
        let rho = phi.powi(gap);
        let v = 1.0 - rho * rho;
        let e1 = 1.0 - rho;
        let ew = w[k] - rho * w[k - 1];
        st.s += e1 * e1 / v;
        st.u += e1 * ew / v;
        st.q += ew * ew / v;
        st.log_det += v.ln();
    }
    st.s /= xi_sq;
    st.u /= xi_sq;
    st.q /= xi_sq;
    st.log_det += m as f64 * xi_sq.ln();
    st
}

/// Dense `m × m` matrix with entries `ξ² φ^{|d_k − d_l|}`.
pub fn build_ar1_cov(xi_sq: f64, phi: f64, days: &[u8]) -> Result<DMatrix<f64>> {
    check_days(days)?;
    if !(phi.abs() < 1.0) {
        return Err(Error::Data(format!("autocorrelation {phi} outside (-1, 1)")));
    }
    if !(xi_sq > 0.0) {
        return Err(Error::Data(format!("variance {xi_sq} not positive")));
    }
    let m = days.len();
    Ok(DMatrix::from_fn(m, m, |k, l| {
        let gap = (i32::from(days[k]) - i32::from(days[l])).abs();
        xi_sq * phi.powi(gap)
    }))
}
