//! Weekend ratio adjustment, survey-weight equalization, the preliminary
//! AR(1) mixed model and the age-cubic measurement-error variance.

use std::cell::RefCell;

use argmin::core::{CostFunction, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statskernel::ols;

use crate::ar1::ar1_stats;
use crate::error::{Error, Result};
use crate::ingest::DayActivity;

pub const SATURDAY: u8 = 6;
pub const SUNDAY: u8 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeekendModel {
    pub psi0: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub sigma_kappa_sq: f64,
    pub grand_mean: f64,
}

impl WeekendModel {
    pub fn predict(&self, day_of_week: u8) -> f64 {
        match day_of_week {
            SATURDAY => self.psi0 + self.psi1,
            SUNDAY => self.psi0 + self.psi2,
            _ => self.psi0,
        }
    }
}

/// OLS of daily MVPA minutes on Saturday and Sunday indicators.
pub fn fit_weekend_model(days: &[DayActivity]) -> Result<WeekendModel> {
    let mut classes: Vec<u8> = days.iter().map(|d| d.day_of_week).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 3 {
        return Err(Error::Data(format!(
            "weekend model needs at least 3 distinct days of the week, found {classes:?}"
        )));
    }
    let n = days.len();
    let x = DMatrix::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => f64::from(u8::from(days[i].day_of_week == SATURDAY)),
        _ => f64::from(u8::from(days[i].day_of_week == SUNDAY)),
    });
    let y = DVector::from_iterator(n, days.iter().map(|d| d.mvpa_minutes));
    let fit = ols(&x, &y).map_err(|e| Error::Data(format!("weekend model: {e}")))?;
    let grand_mean = y.mean();
    if !(grand_mean > 0.0) {
        return Err(Error::Data("mean daily MVPA is zero; weekend ratio undefined".into()));
    }
    Ok(WeekendModel {
        psi0: fit.coefficients[0],
        psi1: fit.coefficients[1],
        psi2: fit.coefficients[2],
        sigma_kappa_sq: fit.sigma_sq,
        grand_mean,
    })
}

/// `W₁ = W̄₀ / Ŵ₀ · W₀`.
pub fn adjust_weekend(day: &DayActivity, model: &WeekendModel) -> Result<f64> {
    let predicted = model.predict(day.day_of_week);
    if !(predicted > 0.0) {
        return Err(Error::Data(format!(
            "participant {} day {}: predicted MVPA {predicted} is not positive",
            day.participant_id, day.day_index
        )));
    }
    Ok(model.grand_mean / predicted * day.mvpa_minutes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedActivity {
    pub participant_id: String,
    pub day_index: u8,
    pub w1: f64,
    pub w: f64,
}

impl AdjustedActivity {
    pub fn new(participant_id: String, day_index: u8, w1: f64) -> Self {
        Self {
            participant_id,
            day_index,
            w1,
            w: w1.powf(0.25),
        }
    }
}

/// Equal-weight version of a weighted sample: value `i` becomes
/// `F̂⁻¹((s_i − 0.5)/n)` with `F̂` the weighted ECDF, `s_i` the rank of value
/// `i` (ties ranked by input order) and `F̂⁻¹(q) = inf{a : F̂(a) ≥ q}`.
pub fn adjust_survey_weights(values: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let n = values.len();
    if weights.len() != n {
        return Err(Error::Data(format!(
            "{n} values but {} survey weights",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Data(format!("survey weight {w} is not positive")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("value {v} is not finite")));
    }
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    // Weighted ECDF evaluated at each order statistic; equal values share the
    // cumulative mass of the whole tie block.
    let mut cdf = vec![0.0; n];
    let mut acc = 0.0;
    let mut k = 0;
    while k < n {
        let mut j = k;
        while j < n && values[order[j]] == values[order[k]] {
            acc += weights[order[j]] / total;
            j += 1;
        }
        for c in cdf.iter_mut().take(j).skip(k) {
            *c = acc;
        }
        k = j;
    }
    let mut out = vec![0.0; n];
    let mut pos = 0;
    for (rank0, &i) in order.iter().enumerate() {
        let q = (rank0 as f64 + 0.5) / n as f64;
        // Levels increase with rank, so the search pointer only moves forward.
        while pos + 1 < n && cdf[pos] < q * (1.0 - 1e-12) {
            pos += 1;
        }
        out[i] = values[order[pos]];
    }
    Ok(out)
}

/// One participant's positive days for the preliminary mixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct Ar1Unit {
    pub z: Vec<f64>,
    pub age: f64,
    pub days: Vec<u8>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ar1Fit {
    pub phi: f64,
    /// Person-intercept variance over AR(1) innovation variance.
    pub theta: f64,
    pub sigma_sq: f64,
    pub beta: Vec<f64>,
    pub loglik: f64,
    pub iterations: u64,
    /// Conditional residuals `W − Zβ̂ − û`, one vector per unit.
    pub residuals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub max_iters: u64,
    pub sd_tolerance: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            sd_tolerance: 1e-9,
        }
    }
}

struct Profile<'a> {
    units: &'a [Ar1Unit],
    columns: Vec<usize>,
    trace: RefCell<Vec<(f64, f64, f64)>>,
}

struct ProfileEval {
    loglik: f64,
    beta: DVector<f64>,
    sigma_sq: f64,
}

impl Profile<'_> {
    fn z(&self, unit: &Ar1Unit) -> DVector<f64> {
        DVector::from_iterator(self.columns.len(), self.columns.iter().map(|&c| unit.z[c]))
    }

    fn evaluate(&self, phi: f64, theta: f64) -> Option<ProfileEval> {
        let p = self.columns.len();
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        let mut stats = Vec::with_capacity(self.units.len());
        let mut n_obs = 0usize;
        let mut log_det = 0.0;
        for unit in self.units {
            let st = ar1_stats(&unit.w, &unit.days, 1.0, phi);
            let denom = 1.0 + theta * st.s;
            let z = self.z(unit);
            xtx += &z * z.transpose() * (st.s / denom);
            xty += &z * (st.u / denom);
            n_obs += st.m;
            log_det += st.log_det + denom.ln();
            stats.push((st, denom, z));
        }
        let beta = xtx.cholesky()?.solve(&xty);
        let mut quad = 0.0;
        for (st, denom, z) in &stats {
            let mu = z.dot(&beta);
            quad += st.q - theta * st.u * st.u / denom - 2.0 * mu * st.u / denom + mu * mu * st.s / denom;
        }
        let n = n_obs as f64;
        let sigma_sq = quad / n;
        if !(sigma_sq > 0.0) {
            return None;
        }
        let loglik = -0.5 * (n * (statskernel::density::LN_2PI + sigma_sq.ln()) + log_det + n);
        Some(ProfileEval { loglik, beta, sigma_sq })
    }
}

/// Negative profile log-likelihood over `(atanh φ, log θ)`.
struct ProfileCost<'a, 'b>(&'a Profile<'b>);

impl CostFunction for ProfileCost<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        let (phi, theta) = (p[0].tanh(), p[1].exp());
        let value = if p[0].abs() > 8.0 || p[1].abs() > 30.0 {
            f64::INFINITY
        } else {
            self.0.evaluate(phi, theta).map_or(f64::INFINITY, |e| -e.loglik)
        };
        self.0.trace.borrow_mut().push((phi, theta, value));
        Ok(value)
    }
}

/// Maximum likelihood fit of `W_ij = Z_iβ + u_i + e_ij` with `u_i ~ N(0, θσ²)`
/// and AR(1) errors of variance `σ²`, profiling out `β` and `σ²`.
pub fn fit_preliminary_ar1(units: &[Ar1Unit], settings: &OptimizerSettings) -> Result<Ar1Fit> {
    let units: Vec<Ar1Unit> = units.iter().filter(|u| !u.w.is_empty()).cloned().collect();
    let first = units
        .first()
        .ok_or_else(|| Error::Data("no positive days for the preliminary AR(1) fit".into()))?;
    for u in &units {
        if u.w.len() != u.days.len() || u.z.len() != first.z.len() {
            return Err(Error::Data("inconsistent preliminary-fit unit".into()));
        }
        crate::ar1::build_ar1_cov(1.0, 0.0, &u.days)?;
    }
    let w0 = first.w[0];
    if units.iter().all(|u| u.w.iter().all(|w| *w == w0)) {
        let mut beta = vec![0.0; first.z.len()];
        beta[0] = w0;
        return Ok(Ar1Fit {
            phi: 0.0,
            theta: 0.0,
            sigma_sq: 0.0,
            beta,
            loglik: f64::INFINITY,
            iterations: 0,
            residuals: units.iter().map(|u| vec![0.0; u.w.len()]).collect(),
        });
    }
    // Covariates that never vary across units (other than the intercept)
    // are dropped; their coefficient is reported as zero.
    let columns: Vec<usize> = (0..first.z.len())
        .filter(|&c| c == 0 || units.iter().any(|u| u.z[c] != first.z[c]))
        .collect();
    let profile = Profile {
        units: &units,
        columns,
        trace: RefCell::new(Vec::new()),
    };
    let simplex = vec![vec![0.2, 0.0], vec![0.6, 0.0], vec![0.2, 1.0]];
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(settings.sd_tolerance)
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let res = Executor::new(ProfileCost(&profile), solver)
        .configure(|s| s.max_iters(settings.max_iters))
        .run()
        .map_err(|e| Error::Optimizer(e.to_string()))?;
    let state = res.state();
    let converged = matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverConverged)
    );
    if !converged {
        let trace = profile.trace.borrow();
        let tail: Vec<String> = trace
            .iter()
            .rev()
            .take(10)
            .rev()
            .map(|(phi, theta, c)| format!("phi={phi:.5} theta={theta:.5} -loglik={c:.6}"))
            .collect();
        return Err(Error::Optimizer(format!(
            "{:?} after {} iterations; last evaluations: [{}]",
            state.get_termination_status(),
            state.get_iter(),
            tail.join("; ")
        )));
    }
    let best = state
        .get_best_param()
        .ok_or_else(|| Error::Optimizer("no best parameter".into()))?;
    let (phi, theta) = (best[0].tanh(), best[1].exp());
    let eval = profile
        .evaluate(phi, theta)
        .ok_or_else(|| Error::Optimizer("likelihood undefined at optimum".into()))?;
    let mut beta = vec![0.0; first.z.len()];
    for (k, &c) in profile.columns.iter().enumerate() {
        beta[c] = eval.beta[k];
    }
    let residuals = units
        .iter()
        .map(|u| {
            let mu: f64 = u.z.iter().zip(&beta).map(|(z, b)| z * b).sum();
            let st = ar1_stats(&u.w, &u.days, 1.0, phi);
            let blup = theta * (st.u - mu * st.s) / (1.0 + theta * st.s);
            u.w.iter().map(|w| w - mu - blup).collect()
        })
        .collect();
    Ok(Ar1Fit {
        phi,
        theta,
        sigma_sq: eval.sigma_sq,
        beta,
        loglik: eval.loglik,
        iterations: state.get_iter(),
        residuals,
    })
}

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-4;

/// `ξ²(age) = max(δ₀ + δ₁a + δ₂a² + δ₃a³, floor)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceFunction {
    pub delta: [f64; 4],
    pub floor: f64,
}

impl VarianceFunction {
    pub fn eval(&self, age: f64) -> f64 {
        let d = &self.delta;
        let v = d[0] + age * (d[1] + age * (d[2] + age * d[3]));
        v.max(self.floor)
    }
}

/// OLS of squared residuals on a cubic in age.
pub fn fit_variance_function(residuals: &[f64], ages: &[f64], floor: f64) -> Result<VarianceFunction> {
    if residuals.len() != ages.len() {
        return Err(Error::Data(format!(
            "{} residuals but {} ages",
            residuals.len(),
            ages.len()
        )));
    }
    let mut distinct: Vec<f64> = ages.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 4 {
        return Err(Error::Data(format!(
            "variance function needs at least 4 distinct ages, found {}",
            distinct.len()
        )));
    }
    let n = ages.len();
    let x = DMatrix::from_fn(n, 4, |i, j| ages[i].powi(j as i32));
    let y = DVector::from_iterator(n, residuals.iter().map(|e| e * e));
    let fit = ols(&x, &y).map_err(|e| Error::Data(format!("variance function: {e}")))?;
    Ok(VarianceFunction {
        delta: [
            fit.coefficients[0],
            fit.coefficients[1],
            fit.coefficients[2],
            fit.coefficients[3],
        ],
        floor,
    })
}
