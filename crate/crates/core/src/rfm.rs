//! Nonlinear seemingly unrelated regressions of the seven risk factors on
//! usual MVPA, with a finite mixture of multivariate Normal errors.
//!
//! Risk factors are ordered waist, log-glucose, log-triglycerides, SBP, DBP,
//! LDL, HDL. The first four follow `−L / (1 + e^{−K(x−B)})`, the last three
//! `slope · x`, where `x = t^{1/4}` and `t` is usual MVPA in minutes. The
//! intercepts live in the component means `λ_h`.
//!
//! Each iteration draws one row of the MEM posterior pool of `t` and then
//! performs one sweep over (ζ, p, λ, Σ, γ) in a configurable order.

use itertools::Itertools;
use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statskernel::density::{log_sum_exp, LN_2PI};
use statskernel::diagnostics::gelman_rubin;
use statskernel::dist::{sample_categorical_log, sample_dirichlet, sample_inverse_wishart, std_normal, symmetrize};
use statskernel::metropolis::{adaptive_rw_metropolis, AdaptiveSettings, ChainState};
use statskernel::rng::{stream_id, stream_rng, KernelRng};
use statskernel::Spd;

use crate::error::{Error, Result};

pub const R: usize = 7;
pub const CURVES: usize = 4;
pub const GAMMA_LEN: usize = 15;
const STREAM_RFM: u64 = 0x5246_4D00;

pub type Vec7 = SVector<f64, R>;
pub type Mat7 = SMatrix<f64, R, R>;

pub const FACTOR_NAMES: [&str; R] = ["waist", "log_glucose", "log_triglycerides", "sbp", "dbp", "ldl", "hdl"];

/// `M − L / (1 + e^{−K(x−B)})`.
pub fn sigmoid(m: f64, l: f64, k: f64, b: f64, x: f64) -> f64 {
    m - l / (1.0 + (-k * (x - b)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveParams {
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

impl CurveParams {
    /// The curve with its level removed.
    pub fn drop_at(&self, x: f64) -> f64 {
        sigmoid(0.0, self.l, self.k, self.b, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gamma {
    pub curves: [CurveParams; CURVES],
    pub slopes: [f64; R - CURVES],
}

impl Gamma {
    pub fn to_array(&self) -> [f64; GAMMA_LEN] {
        let mut a = [0.0; GAMMA_LEN];
        for (j, c) in self.curves.iter().enumerate() {
            a[3 * j] = c.l;
            a[3 * j + 1] = c.k;
            a[3 * j + 2] = c.b;
        }
        a[12..].copy_from_slice(&self.slopes);
        a
    }

    pub fn from_array(a: &[f64; GAMMA_LEN]) -> Self {
        let curve = |j: usize| CurveParams {
            l: a[3 * j],
            k: a[3 * j + 1],
            b: a[3 * j + 2],
        };
        Gamma {
            curves: [curve(0), curve(1), curve(2), curve(3)],
            slopes: [a[12], a[13], a[14]],
        }
    }

    pub fn names() -> Vec<String> {
        let mut n = Vec::with_capacity(GAMMA_LEN);
        for f in &FACTOR_NAMES[..CURVES] {
            for p in ["L", "K", "B"] {
                n.push(format!("{p}_{f}"));
            }
        }
        for f in &FACTOR_NAMES[CURVES..] {
            n.push(format!("slope_{f}"));
        }
        n
    }
}

/// Slots of γ belonging to factor `j`.
fn factor_slots(j: usize) -> std::ops::Range<usize> {
    if j < CURVES {
        3 * j..3 * j + 3
    } else {
        12 + (j - CURVES)..13 + (j - CURVES)
    }
}

fn eval_factor(j: usize, x: f64, g: &[f64]) -> f64 {
    if j < CURVES {
        sigmoid(0.0, g[3 * j], g[3 * j + 1], g[3 * j + 2], x)
    } else {
        g[12 + j - CURVES] * x
    }
}

/// `m(x; γ)` on the fourth-root-minutes scale.
pub fn eval_mean(x: f64, gamma: &Gamma) -> Vec7 {
    let g = gamma.to_array();
    Vec7::from_fn(|j, _| eval_factor(j, x, &g))
}

pub fn fourth_root(t: f64) -> f64 {
    t.max(0.0).powf(0.25)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub lambda: Vec<Vec7>,
    pub sigma: Vec<Mat7>,
    pub p: Vec<f64>,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.p.len();
        if h == 0 || self.lambda.len() != h || self.sigma.len() != h {
            return Err(Error::Data("mixture parameter lengths disagree".into()));
        }
        if (self.p.iter().sum::<f64>() - 1.0).abs() > 1e-8 || self.p.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Data(format!("mixture weights {:?} are not a probability vector", self.p)));
        }
        for s in &self.sigma {
            if s.cholesky().is_none() {
                return Err(Error::Data("mixture covariance is not positive definite".into()));
            }
        }
        Ok(())
    }

    /// Relabels so that new component `h` is old component `perm[h]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        MixtureParams {
            lambda: perm.iter().map(|&k| self.lambda[k]).collect(),
            sigma: perm.iter().map(|&k| self.sigma[k]).collect(),
            p: perm.iter().map(|&k| self.p[k]).collect(),
        }
    }

    /// Marginal mean and covariance of the error mixture around γ₀.
    pub fn moments(&self) -> (Vec7, Mat7) {
        let g0 = compute_gamma0(&self.lambda, &self.p);
        let mut cov = Mat7::zeros();
        for h in 0..self.p.len() {
            let d = self.lambda[h] - g0;
            cov += (self.sigma[h] + d * d.transpose()) * self.p[h];
        }
        (g0, cov)
    }
}

/// `γ₀ = λ₁ − Σ_h p_h (λ₁ − λ_h)`.
pub fn compute_gamma0(lambda: &[Vec7], p: &[f64]) -> Vec7 {
    let l1 = lambda[0];
    let mut g = l1;
    for (l, w) in lambda.iter().zip(p) {
        g -= (l1 - l) * *w;
    }
    g
}

/// Per-component quantities for density evaluation.
#[derive(Debug, Clone)]
pub struct Component {
    pub ln_p: f64,
    pub log_det: f64,
    /// Inverse of the lower Cholesky factor.
    pub l_inv: Mat7,
    pub precision: Mat7,
}

impl Component {
    pub fn log_density(&self, resid: &Vec7) -> f64 {
        let z = self.l_inv * resid;
        -0.5 * (R as f64 * LN_2PI + self.log_det + z.norm_squared())
    }
}

pub fn mixture_cache(mix: &MixtureParams) -> Result<Vec<Component>> {
    mix.sigma
        .iter()
        .zip(&mix.p)
        .map(|(s, p)| {
            let chol = s
                .cholesky()
                .ok_or_else(|| Error::Data("mixture covariance is not positive definite".into()))?;
            let l = chol.l();
            let l_inv = l
                .solve_lower_triangular(&Mat7::identity())
                .ok_or_else(|| Error::Data("singular mixture covariance".into()))?;
            let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok(Component {
                ln_p: p.ln(),
                log_det,
                precision: l_inv.transpose() * l_inv,
                l_inv,
            })
        })
        .collect()
}

/// `log Σ_h p_h N(y; λ_h + m, Σ_h)`.
pub fn mixture_logpdf(y: &Vec7, m: &Vec7, mix: &MixtureParams, cache: &[Component]) -> f64 {
    let terms: Vec<f64> = cache
        .iter()
        .zip(&mix.lambda)
        .map(|(c, l)| c.ln_p + c.log_density(&(y - l - m)))
        .collect();
    log_sum_exp(&terms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfmPriors {
    pub lambda_mean: [f64; R],
    pub lambda_sd: [f64; R],
    /// (L, K, B) per sigmoidal factor.
    pub curve_mean: [[f64; 3]; CURVES],
    pub curve_sd: [[f64; 3]; CURVES],
    pub slope_mean: [f64; R - CURVES],
    pub slope_sd: [f64; R - CURVES],
    pub iw_df: f64,
    /// Diagonal of the inverse-Wishart scale matrix.
    pub iw_scale: [f64; R],
    pub dirichlet: f64,
}

impl Default for RfmPriors {
    fn default() -> Self {
        Self {
            lambda_mean: [98.0, 4.7, 4.73, 130.0, 0.0, 0.0, 0.0],
            lambda_sd: [17.0, 0.1, 0.6, 7.0, 100.0, 100.0, 100.0],
            curve_mean: [[7.0, 3.0, 2.11], [0.16, 3.6, 1.4], [0.12, 4.88, 2.11], [18.0, 3.0, 1.3]],
            curve_sd: [[8.0, 1.5, 0.4], [0.08, 0.7, 1.0], [0.4, 2.0, 0.4], [5.0, 1.0, 1.0]],
            slope_mean: [0.0; 3],
            slope_sd: [100.0; 3],
            iw_df: 8.0,
            iw_scale: [1.0; R],
            dirichlet: 1.0,
        }
    }
}

impl RfmPriors {
    pub fn validate(&self) -> Result<()> {
        let sds = self.lambda_sd.iter().chain(self.curve_sd.iter().flatten()).chain(&self.slope_sd);
        if sds.clone().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("rfm prior standard deviations must be positive".into()));
        }
        if !(self.iw_df > (R - 1) as f64) || self.iw_scale.iter().any(|s| !(*s > 0.0)) || !(self.dirichlet > 0.0) {
            return Err(Error::Config("rfm inverse-Wishart or Dirichlet prior is improper".into()));
        }
        Ok(())
    }

    /// The same priors with the inverse-Wishart scale diagonal set to the
    /// per-factor sample variances of `y`.
    pub fn with_data_scale(&self, y: &[Vec7]) -> Result<Self> {
        if y.len() < 2 {
            return Err(Error::Data("a data-scaled prior needs at least two observations".into()));
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<Vec7>() / n;
        let mut scaled = self.clone();
        for j in 0..R {
            scaled.iw_scale[j] = y.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0);
        }
        scaled.validate()?;
        Ok(scaled)
    }

    fn gamma_mean_sd(&self) -> ([f64; GAMMA_LEN], [f64; GAMMA_LEN]) {
        let mut m = [0.0; GAMMA_LEN];
        let mut s = [0.0; GAMMA_LEN];
        for j in 0..CURVES {
            for k in 0..3 {
                m[3 * j + k] = self.curve_mean[j][k];
                s[3 * j + k] = self.curve_sd[j][k];
            }
        }
        m[12..].copy_from_slice(&self.slope_mean);
        s[12..].copy_from_slice(&self.slope_sd);
        (m, s)
    }

    /// Log prior of the γ slots in `slots` at `values`; −∞ when a rate is
    /// not positive.
    fn gamma_logprior(&self, slots: &[usize], values: &[f64]) -> f64 {
        let (m, s) = self.gamma_mean_sd();
        let mut lp = 0.0;
        for (&k, &v) in slots.iter().zip(values) {
            if k < 12 && k % 3 == 1 && !(v > 0.0) {
                return f64::NEG_INFINITY;
            }
            let z = (v - m[k]) / s[k];
            lp -= 0.5 * z * z;
        }
        lp
    }
}

/// Draw of `p ~ Dirichlet(a + n)`.
pub fn sample_p<G: Rng + ?Sized>(counts: &[usize], a: f64, rng: &mut G) -> Result<Vec<f64>> {
    if counts.len() == 1 {
        return Ok(vec![1.0]);
    }
    let alpha: Vec<f64> = counts.iter().map(|&n| a + n as f64).collect();
    Ok(sample_dirichlet(&alpha, rng)?)
}

/// Posterior mean and covariance of a component intercept under a
/// `N(m₀, diag(v₀))` prior, given `n` residuals with sum `resid_sum` and
/// error covariance with inverse `sigma_inv`.
pub fn lambda_posterior(
    prior_mean: &DVector<f64>,
    prior_var: &DVector<f64>,
    sigma_inv: &DMatrix<f64>,
    n: usize,
    resid_sum: &DVector<f64>,
) -> Result<(DVector<f64>, Spd)> {
    let d = prior_mean.len();
    let mut prec = sigma_inv * n as f64;
    let mut lin = sigma_inv * resid_sum;
    for k in 0..d {
        prec[(k, k)] += 1.0 / prior_var[k];
        lin[k] += prior_mean[k] / prior_var[k];
    }
    let prec = Spd::new(symmetrize(prec))?;
    let mean = prec.solve(&lin);
    let cov = Spd::new(symmetrize(prec.inverse()))?;
    Ok((mean, cov))
}

/// Conjugate draw of a component intercept; `n = 0` gives a prior draw.
pub fn sample_lambda<G: Rng + ?Sized>(
    prior_mean: &DVector<f64>,
    prior_var: &DVector<f64>,
    sigma_inv: &DMatrix<f64>,
    n: usize,
    resid_sum: &DVector<f64>,
    rng: &mut G,
) -> Result<DVector<f64>> {
    let (mean, cov) = lambda_posterior(prior_mean, prior_var, sigma_inv, n, resid_sum)?;
    Ok(statskernel::dist::sample_mvn(&mean, &cov, rng)?)
}

/// Draw of `Σ ~ IW(d₀ + n, D₀ + D)` with `D` the residual scatter.
pub fn sample_sigma_m<G: Rng + ?Sized>(
    scatter: &DMatrix<f64>,
    n: usize,
    d0: f64,
    scale0: &DMatrix<f64>,
    rng: &mut G,
) -> Result<Spd> {
    let scale = Spd::new(symmetrize(scale0 + scatter))?;
    Ok(sample_inverse_wishart(d0 + n as f64, &scale, rng)?)
}

/// Log classification weights `ln p_h + log N(y; λ_h + m, Σ_h)`.
pub fn zeta_log_weights(y: &Vec7, m: &Vec7, mix: &MixtureParams, cache: &[Component], out: &mut [f64]) {
    for (h, c) in cache.iter().enumerate() {
        out[h] = c.ln_p + c.log_density(&(y - mix.lambda[h] - m));
    }
}

/// Component label draw.
pub fn sample_zeta<G: Rng + ?Sized>(
    y: &Vec7,
    m: &Vec7,
    mix: &MixtureParams,
    cache: &[Component],
    rng: &mut G,
) -> Result<usize> {
    if cache.len() == 1 {
        return Ok(0);
    }
    let mut w = vec![0.0; cache.len()];
    zeta_log_weights(y, m, mix, cache, &mut w);
    sample_categorical_log(&w, rng).map_err(|_| Error::Data("every mixture component has zero density".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepBlock {
    Zeta,
    P,
    Lambda,
    Sigma,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaBlocking {
    /// One block per risk factor: (L, K, B) or the slope.
    PerFactor,
    /// All fifteen parameters together.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfmSettings {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub components: usize,
    pub sweep_order: Vec<SweepBlock>,
    pub gamma_blocking: GammaBlocking,
    pub rhat_threshold: f64,
    pub relabel_max_iter: usize,
}

impl Default for RfmSettings {
    fn default() -> Self {
        Self {
            chains: 3,
            iterations: 1_000_000,
            burn_in: 10_000,
            thin: 5,
            components: 5,
            sweep_order: vec![SweepBlock::Zeta, SweepBlock::P, SweepBlock::Lambda, SweepBlock::Sigma, SweepBlock::Gamma],
            gamma_blocking: GammaBlocking::PerFactor,
            rhat_threshold: 1.1,
            relabel_max_iter: 100,
        }
    }
}

impl RfmSettings {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::Config("rfm.chains must be at least 2".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config("rfm.burn_in must be below rfm.iterations".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("rfm.thin must be at least 1".into()));
        }
        if self.components == 0 {
            return Err(Error::Config("rfm.components must be at least 1".into()));
        }
        if self.retained() < 10 {
            return Err(Error::Config("rfm needs at least 10 retained draws per chain".into()));
        }
        let mut order = self.sweep_order.clone();
        order.sort_by_key(|b| *b as u8);
        order.dedup();
        if order.len() != 5 || self.sweep_order.len() != 5 {
            return Err(Error::Config("rfm.sweep_order must list zeta, p, lambda, sigma and gamma once each".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RfmDraw {
    pub gamma: Gamma,
    pub mixture: MixtureParams,
    /// Row of the `t` pool used by this iteration.
    pub pool_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    pub mean_deviance: f64,
    pub deviance_at_mean: f64,
    pub p_d: f64,
    pub dic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relabeling {
    /// `permutations[s][h]` is the raw label that becomes label `h` in draw `s`.
    pub permutations: Vec<Vec<usize>>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RfmPosterior {
    pub components: usize,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// Chain-major relabeled draws.
    pub draws: Vec<RfmDraw>,
    pub gamma0: Vec<Vec7>,
    pub dic: Dic,
    pub rhat: Vec<(String, f64)>,
    pub acceptance: Vec<(String, f64)>,
    pub relabeling: Relabeling,
}

impl RfmPosterior {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn check_convergence(&self, threshold: f64) -> Result<()> {
        let offenders: Vec<(String, f64)> = self.rhat.iter().filter(|(_, r)| !(*r <= threshold)).cloned().collect();
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::Convergence { threshold, offenders })
        }
    }

    /// Draws of γ as flat arrays.
    pub fn gamma_draws(&self) -> Vec<[f64; GAMMA_LEN]> {
        self.draws.iter().map(|d| d.gamma.to_array()).collect()
    }

    pub fn gamma_mean(&self) -> Gamma {
        let mut a = [0.0; GAMMA_LEN];
        for d in &self.draws {
            for (s, v) in a.iter_mut().zip(d.gamma.to_array()) {
                *s += v;
            }
        }
        a.iter_mut().for_each(|s| *s /= self.draws.len() as f64);
        Gamma::from_array(&a)
    }

    /// Posterior means of (γ, λ, Σ, p) after relabeling.
    pub fn mean_draw(&self) -> (Gamma, MixtureParams) {
        let h = self.components;
        let n = self.draws.len() as f64;
        let mut mix = MixtureParams {
            lambda: vec![Vec7::zeros(); h],
            sigma: vec![Mat7::zeros(); h],
            p: vec![0.0; h],
        };
        for d in &self.draws {
            for k in 0..h {
                mix.lambda[k] += d.mixture.lambda[k] / n;
                mix.sigma[k] += d.mixture.sigma[k] / n;
                mix.p[k] += d.mixture.p[k] / n;
            }
        }
        (self.gamma_mean(), mix)
    }
}

/// Stephens' relabeling. `probs(s, out)` fills the row-major `n × h`
/// classification matrix of draw `s`.
pub fn relabel_with<F>(draws: usize, n: usize, h: usize, probs: F, max_iter: usize) -> Relabeling
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let identity: Vec<usize> = (0..h).collect();
    let mut perms = vec![identity.clone(); draws];
    if h == 1 || draws == 0 {
        return Relabeling {
            permutations: perms,
            iterations: 0,
            converged: true,
        };
    }
    let candidates: Vec<Vec<usize>> = (0..h).permutations(h).collect();
    for iter in 1..=max_iter {
        let mut qhat = vec![0.0; n * h];
        let mut q = vec![0.0; n * h];
        for (s, perm) in perms.iter().enumerate() {
            probs(s, &mut q);
            for i in 0..n {
                for k in 0..h {
                    qhat[i * h + k] += q[i * h + perm[k]];
                }
            }
        }
        let log_qhat: Vec<f64> = qhat.iter().map(|v| (v / draws as f64).max(1e-300).ln()).collect();
        let next: Vec<Vec<usize>> = (0..draws)
            .into_par_iter()
            .map(|s| {
                let mut q = vec![0.0; n * h];
                probs(s, &mut q);
                // cost[a][b]: raw label b assigned to relabeled slot a.
                let mut cost = vec![0.0; h * h];
                for i in 0..n {
                    for a in 0..h {
                        let lq = log_qhat[i * h + a];
                        for b in 0..h {
                            cost[a * h + b] -= q[i * h + b] * lq;
                        }
                    }
                }
                let total = |p: &[usize]| p.iter().enumerate().map(|(a, &b)| cost[a * h + b]).sum::<f64>();
                let current = &perms[s];
                let mut best = current.clone();
                let mut best_cost = total(current);
                for c in &candidates {
                    let v = total(c);
                    if v < best_cost - 1e-9 * best_cost.abs().max(1.0) {
                        best_cost = v;
                        best = c.clone();
                    }
                }
                best
            })
            .collect();
        let changed = next != perms;
        perms = next;
        if !changed {
            return Relabeling {
                permutations: perms,
                iterations: iter,
                converged: true,
            };
        }
    }
    log::warn!("relabeling did not settle after {max_iter} passes; returning the last permutations");
    Relabeling {
        permutations: perms,
        iterations: max_iter,
        converged: false,
    }
}

/// Stephens' relabeling over stored row-major classification matrices.
pub fn relabel(probs: &[Vec<f64>], n: usize, h: usize, max_iter: usize) -> Relabeling {
    relabel_with(probs.len(), n, h, |s, out| out.copy_from_slice(&probs[s]), max_iter)
}

/// Classification probabilities of every participant under one draw.
pub fn classification_probs(y: &[Vec7], x: &[f64], gamma: &Gamma, mix: &MixtureParams, out: &mut [f64]) -> Result<()> {
    let h = mix.components();
    let cache = mixture_cache(mix)?;
    let mut w = vec![0.0; h];
    for (i, (yi, xi)) in y.iter().zip(x).enumerate() {
        zeta_log_weights(yi, &eval_mean(*xi, gamma), mix, &cache, &mut w);
        let lse = log_sum_exp(&w);
        for k in 0..h {
            out[i * h + k] = (w[k] - lse).exp();
        }
    }
    Ok(())
}

/// `−2 Σ_i log Σ_h p_h N(y_i; λ_h + m(x_i), Σ_h)`.
pub fn deviance(y: &[Vec7], x: &[f64], gamma: &Gamma, mix: &MixtureParams) -> Result<f64> {
    let cache = mixture_cache(mix)?;
    Ok(-2.0
        * y.iter()
            .zip(x)
            .map(|(yi, xi)| mixture_logpdf(yi, &eval_mean(*xi, gamma), mix, &cache))
            .sum::<f64>())
}

/// DIC with the labels integrated out. Each draw's deviance uses the `t`
/// row it was sampled with; the plug-in deviance uses posterior means of the
/// parameters and of `x = t^{1/4}`.
pub fn compute_dic(post: &RfmPosterior, y: &[Vec7], pool_x: &[Vec<f64>]) -> Result<Dic> {
    let devs: Vec<f64> = post
        .draws
        .par_iter()
        .map(|d| deviance(y, &pool_x[d.pool_index], &d.gamma, &d.mixture))
        .collect::<Result<_>>()?;
    let mean_deviance = devs.iter().sum::<f64>() / devs.len() as f64;
    let mut xbar = vec![0.0; y.len()];
    for d in &post.draws {
        for (a, v) in xbar.iter_mut().zip(&pool_x[d.pool_index]) {
            *a += v / post.draws.len() as f64;
        }
    }
    let (g, mix) = post.mean_draw();
    let deviance_at_mean = deviance(y, &xbar, &g, &mix)?;
    let p_d = mean_deviance - deviance_at_mean;
    Ok(Dic {
        mean_deviance,
        deviance_at_mean,
        p_d,
        dic: mean_deviance + p_d,
    })
}

/// Fourth roots of a pool of usual-MVPA draws.
pub fn pool_to_x(pool: &[Vec<f64>]) -> Vec<Vec<f64>> {
    pool.iter().map(|row| row.iter().map(|t| fourth_root(*t)).collect()).collect()
}

/// Algorithm: each iteration draws a `t` row uniformly from `pool`, then
/// sweeps. `pool` is draws × participants aligned with `y`.
pub fn run_two_stage(
    pool: &[Vec<f64>],
    y: &[Vec7],
    priors: &RfmPriors,
    settings: &RfmSettings,
    seed: u64,
) -> Result<RfmPosterior> {
    settings.validate()?;
    priors.validate()?;
    if pool.is_empty() {
        return Err(Error::Data("usual-MVPA pool is empty".into()));
    }
    if y.is_empty() {
        return Err(Error::Data("risk factor cohort is empty".into()));
    }
    if let Some(row) = pool.iter().find(|r| r.len() != y.len()) {
        return Err(Error::Data(format!(
            "usual-MVPA pool has {} participants but the risk factor cohort has {}",
            row.len(),
            y.len()
        )));
    }
    if pool.iter().flatten().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::Data("usual-MVPA pool has a negative or nonfinite value".into()));
    }
    let pool_x = pool_to_x(pool);
    let outputs: Vec<Result<(Vec<RfmDraw>, Vec<(String, f64)>)>> = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, stream_id(&[STREAM_RFM, c as u64, 0]));
            let mut pool_rng = stream_rng(seed, stream_id(&[STREAM_RFM, c as u64, 1]));
            RfmChain::new(y, &pool_x, priors, settings, &mut rng)?.run(&mut rng, &mut pool_rng)
        })
        .collect();
    let mut draws = Vec::new();
    let mut acceptance = Vec::new();
    for (c, o) in outputs.into_iter().enumerate() {
        let (d, a) = o?;
        draws.extend(d);
        acceptance.extend(a.into_iter().map(|(k, v)| (format!("chain{c}.{k}"), v)));
    }
    let h = settings.components;
    let n = y.len();
    let relabeling = relabel_with(
        draws.len(),
        n,
        h,
        |s, out| {
            let d = &draws[s];
            classification_probs(y, &pool_x[d.pool_index], &d.gamma, &d.mixture, out)
                .expect("retained covariances are positive definite");
        },
        settings.relabel_max_iter,
    );
    for (d, perm) in draws.iter_mut().zip(&relabeling.permutations) {
        d.mixture = d.mixture.permuted(perm);
    }
    let gamma0: Vec<Vec7> = draws.iter().map(|d| compute_gamma0(&d.mixture.lambda, &d.mixture.p)).collect();
    let per_chain = settings.retained();
    let traces: Vec<Vec<Vec<f64>>> = draws
        .chunks(per_chain)
        .zip(gamma0.chunks(per_chain))
        .map(|(dc, gc)| {
            dc.iter()
                .zip(gc)
                .map(|(d, g)| d.gamma.to_array().iter().chain(g.iter()).copied().collect())
                .collect()
        })
        .collect();
    let rhat = gelman_rubin(&traces)?;
    let names = Gamma::names().into_iter().chain(FACTOR_NAMES.iter().map(|f| format!("gamma0_{f}")));
    let mut post = RfmPosterior {
        components: h,
        chains: settings.chains,
        draws_per_chain: per_chain,
        draws,
        gamma0,
        dic: Dic {
            mean_deviance: f64::NAN,
            deviance_at_mean: f64::NAN,
            p_d: f64::NAN,
            dic: f64::NAN,
        },
        rhat: names.zip(rhat.values).collect(),
        acceptance,
        relabeling,
    };
    post.dic = compute_dic(&post, y, &pool_x)?;
    Ok(post)
}

/// Known-`t` inference: a pool of one row.
pub fn run_fixed_t(t: &[f64], y: &[Vec7], priors: &RfmPriors, settings: &RfmSettings, seed: u64) -> Result<RfmPosterior> {
    run_two_stage(&[t.to_vec()], y, priors, settings, seed)
}

/// DIC for every `H` in `components`.
pub fn select_h(
    pool: &[Vec<f64>],
    y: &[Vec7],
    priors: &RfmPriors,
    settings: &RfmSettings,
    components: &[usize],
    seed: u64,
) -> Result<Vec<(usize, Dic)>> {
    components
        .iter()
        .map(|&h| {
            let s = RfmSettings {
                components: h,
                ..settings.clone()
            };
            run_two_stage(pool, y, priors, &s, seed).map(|p| (h, p.dic))
        })
        .collect()
}

/// Index of the smallest DIC.
pub fn argmin_dic(scan: &[(usize, Dic)]) -> Option<usize> {
    scan.iter()
        .enumerate()
        .filter(|(_, (_, d))| d.dic.is_finite())
        .min_by(|a, b| a.1 .1.dic.total_cmp(&b.1 .1.dic))
        .map(|(k, _)| k)
}

struct RfmChain<'a> {
    y: &'a [Vec7],
    pool_x: &'a [Vec<f64>],
    priors: &'a RfmPriors,
    settings: &'a RfmSettings,
    gamma: [f64; GAMMA_LEN],
    mix: MixtureParams,
    cache: Vec<Component>,
    zeta: Vec<usize>,
    x: Vec<f64>,
    m: Vec<Vec7>,
    resid: Vec<Vec7>,
    scaled: Vec<Vec7>,
    blocks: Vec<Vec<usize>>,
    block_states: Vec<ChainState>,
    adapt: AdaptiveSettings,
}

impl<'a> RfmChain<'a> {
    fn new(
        y: &'a [Vec7],
        pool_x: &'a [Vec<f64>],
        priors: &'a RfmPriors,
        settings: &'a RfmSettings,
        rng: &mut KernelRng,
    ) -> Result<Self> {
        let n = y.len();
        let h = settings.components;
        let (gm, gs) = priors.gamma_mean_sd();
        let mut gamma = [0.0; GAMMA_LEN];
        for k in 0..GAMMA_LEN {
            gamma[k] = gm[k] + 0.1 * gs[k] * std_normal(rng);
            if k < 12 && k % 3 == 1 {
                gamma[k] = gamma[k].max(0.2);
            }
        }
        // Slopes with flat priors start from zero with a data-scaled jitter.
        let ybar = y.iter().fold(Vec7::zeros(), |a, v| a + v) / n as f64;
        let mut cov = Mat7::zeros();
        for v in y {
            let d = v - ybar;
            cov += d * d.transpose();
        }
        cov /= (n.max(2) - 1) as f64;
        for d in 0..R {
            cov[(d, d)] = cov[(d, d)].max(1e-6);
        }
        if cov.cholesky().is_none() {
            cov = Mat7::from_diagonal(&cov.diagonal());
        }
        for (k, j) in (12..GAMMA_LEN).zip(CURVES..R) {
            gamma[k] = 0.01 * cov[(j, j)].sqrt() * std_normal(rng);
        }
        let g = Gamma::from_array(&gamma);
        let x0 = &pool_x[0];
        let resid0: Vec<Vec7> = y.iter().zip(x0).map(|(v, x)| v - eval_mean(*x, &g)).collect();
        let labels = kmeans_labels(&resid0, &cov.diagonal(), h, rng);
        let mut counts = vec![0usize; h];
        let mut lambda = vec![Vec7::zeros(); h];
        for (r, &k) in resid0.iter().zip(&labels) {
            counts[k] += 1;
            lambda[k] += r;
        }
        let mut sigma = vec![cov; h];
        for k in 0..h {
            lambda[k] /= counts[k].max(1) as f64;
            if counts[k] > 2 * R {
                let mut c = Mat7::from_diagonal(&(cov.diagonal() * 0.01));
                for (r, _) in resid0.iter().zip(&labels).filter(|(_, l)| **l == k) {
                    let d = r - lambda[k];
                    c += d * d.transpose() / counts[k] as f64;
                }
                if c.cholesky().is_some() {
                    sigma[k] = c;
                }
            }
        }
        let mix = MixtureParams {
            lambda,
            sigma,
            p: counts.iter().map(|c| (*c as f64 + 1.0) / (n + h) as f64).collect(),
        };
        let cache = mixture_cache(&mix)?;
        let blocks: Vec<Vec<usize>> = match settings.gamma_blocking {
            GammaBlocking::PerFactor => (0..R).map(|j| vec![j]).collect(),
            GammaBlocking::Joint => vec![(0..R).collect()],
        };
        let block_states = blocks
            .iter()
            .map(|fs| {
                let slots: Vec<usize> = fs.iter().flat_map(|&j| factor_slots(j)).collect();
                let pos: Vec<f64> = slots.iter().map(|&k| gamma[k]).collect();
                let sd: Vec<f64> = slots
                    .iter()
                    .map(|&k| if k < 12 { 0.05 * gs[k] } else { 0.01 * cov[(k - 12 + CURVES, k - 12 + CURVES)].sqrt() })
                    .collect();
                ChainState::with_proposal_sd(pos, 0.0, &sd)
            })
            .collect::<statskernel::Result<Vec<_>>>()?;
        Ok(Self {
            y,
            pool_x,
            priors,
            settings,
            gamma,
            mix,
            cache,
            zeta: vec![0; n],
            x: vec![0.0; n],
            m: vec![Vec7::zeros(); n],
            resid: vec![Vec7::zeros(); n],
            scaled: vec![Vec7::zeros(); n],
            blocks,
            block_states,
            adapt: AdaptiveSettings::with_burn_in(settings.burn_in),
        })
    }

    fn run(mut self, rng: &mut KernelRng, pool_rng: &mut KernelRng) -> Result<(Vec<RfmDraw>, Vec<(String, f64)>)> {
        let mut draws = Vec::with_capacity(self.settings.retained());
        for it in 0..self.settings.iterations {
            let idx = if self.pool_x.len() == 1 { 0 } else { pool_rng.random_range(0..self.pool_x.len()) };
            self.set_x(idx);
            for block in self.settings.sweep_order.clone() {
                match block {
                    SweepBlock::Zeta => self.step_zeta(rng)?,
                    SweepBlock::P => self.step_p(rng)?,
                    SweepBlock::Lambda => self.step_lambda(rng)?,
                    SweepBlock::Sigma => self.step_sigma(rng)?,
                    SweepBlock::Gamma => self.step_gamma(rng),
                }
            }
            if it >= self.settings.burn_in && (it - self.settings.burn_in) % self.settings.thin == 0 {
                draws.push(RfmDraw {
                    gamma: Gamma::from_array(&self.gamma),
                    mixture: self.mix.clone(),
                    pool_index: idx,
                });
            }
        }
        let acc = self
            .blocks
            .iter()
            .zip(&self.block_states)
            .map(|(fs, s)| {
                let name = fs.iter().map(|&j| FACTOR_NAMES[j]).join("+");
                (format!("gamma[{name}]"), s.acceptance_rate())
            })
            .collect();
        Ok((draws, acc))
    }

    fn set_x(&mut self, idx: usize) {
        self.x.copy_from_slice(&self.pool_x[idx]);
        for i in 0..self.y.len() {
            self.m[i] = Vec7::from_fn(|j, _| eval_factor(j, self.x[i], &self.gamma));
        }
    }

    fn step_zeta(&mut self, rng: &mut KernelRng) -> Result<()> {
        let h = self.mix.components();
        if h == 1 {
            self.zeta.iter_mut().for_each(|z| *z = 0);
            return Ok(());
        }
        let mut w = vec![0.0; h];
        for i in 0..self.y.len() {
            zeta_log_weights(&self.y[i], &self.m[i], &self.mix, &self.cache, &mut w);
            self.zeta[i] = sample_categorical_log(&w, rng)
                .map_err(|_| Error::Data("every mixture component has zero density".into()))?;
        }
        Ok(())
    }

    fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.mix.components()];
        for &z in &self.zeta {
            c[z] += 1;
        }
        c
    }

    fn step_p(&mut self, rng: &mut KernelRng) -> Result<()> {
        self.mix.p = sample_p(&self.counts(), self.priors.dirichlet, rng)?;
        self.cache = mixture_cache(&self.mix)?;
        Ok(())
    }

    fn step_lambda(&mut self, rng: &mut KernelRng) -> Result<()> {
        let h = self.mix.components();
        let mut sums = vec![Vec7::zeros(); h];
        let counts = self.counts();
        for i in 0..self.y.len() {
            sums[self.zeta[i]] += self.y[i] - self.m[i];
        }
        let m0 = DVector::from_row_slice(&self.priors.lambda_mean);
        let v0 = DVector::from_iterator(R, self.priors.lambda_sd.iter().map(|s| s * s));
        for k in 0..h {
            let prec = DMatrix::from_column_slice(R, R, self.cache[k].precision.as_slice());
            let s = DVector::from_column_slice(sums[k].as_slice());
            let draw = sample_lambda(&m0, &v0, &prec, counts[k], &s, rng)?;
            self.mix.lambda[k] = Vec7::from_column_slice(draw.as_slice());
        }
        Ok(())
    }

    fn step_sigma(&mut self, rng: &mut KernelRng) -> Result<()> {
        let h = self.mix.components();
        let mut scatter = vec![Mat7::zeros(); h];
        let counts = self.counts();
        for i in 0..self.y.len() {
            let k = self.zeta[i];
            let r = self.y[i] - self.mix.lambda[k] - self.m[i];
            scatter[k] += r * r.transpose();
        }
        let d0 = DMatrix::from_diagonal(&DVector::from_row_slice(&self.priors.iw_scale));
        for k in 0..h {
            let sc = DMatrix::from_column_slice(R, R, scatter[k].as_slice());
            let draw = sample_sigma_m(&sc, counts[k], self.priors.iw_df, &d0, rng)?.matrix();
            self.mix.sigma[k] = Mat7::from_column_slice(draw.as_slice());
        }
        self.cache = mixture_cache(&self.mix)?;
        Ok(())
    }

    fn step_gamma(&mut self, rng: &mut KernelRng) {
        for i in 0..self.y.len() {
            let k = self.zeta[i];
            self.resid[i] = self.y[i] - self.mix.lambda[k] - self.m[i];
            self.scaled[i] = self.cache[k].precision * self.resid[i];
        }
        for b in 0..self.blocks.len() {
            let factors = self.blocks[b].clone();
            let slots: Vec<usize> = factors.iter().flat_map(|&j| factor_slots(j)).collect();
            let mut state = std::mem::replace(&mut self.block_states[b], placeholder());
            for (p, &k) in state.position.iter_mut().zip(&slots) {
                *p = self.gamma[k];
            }
            let current: Vec<f64> = state.position.clone();
            state.log_target = self.priors.gamma_logprior(&slots, &current);
            let target = |v: &[f64]| {
                let lp = self.priors.gamma_logprior(&slots, v);
                if !lp.is_finite() {
                    return lp;
                }
                let mut g = self.gamma;
                for (&k, &val) in slots.iter().zip(v) {
                    g[k] = val;
                }
                let (delta, _) = self.block_delta(&factors, &g);
                lp + delta
            };
            let step = adaptive_rw_metropolis(target, &mut state, &self.adapt, rng);
            if matches!(step, statskernel::Step::Accepted) {
                let mut g = self.gamma;
                for (&k, &val) in slots.iter().zip(&state.position) {
                    g[k] = val;
                }
                let (_, shift) = self.block_delta(&factors, &g);
                self.gamma = g;
                self.apply_block(&factors, &shift);
            }
            self.block_states[b] = state;
        }
    }

    /// Log-target change when the factors in `factors` take their means from
    /// `g` and every component intercept moves by the returned shift, minus
    /// the cohort-average change of those means. Residuals move by
    /// `d = m_old − m_new − shift`; the shift depends only on the pair of γ
    /// values, so the joint move keeps the random-walk symmetry.
    fn block_delta(&self, factors: &[usize], g: &[f64; GAMMA_LEN]) -> (f64, [f64; R]) {
        let n = self.y.len();
        let mut diff = vec![[0.0; R]; n];
        let mut shift = [0.0; R];
        for i in 0..n {
            for (a, &j) in factors.iter().enumerate() {
                let d = self.m[i][j] - eval_factor(j, self.x[i], g);
                diff[i][a] = d;
                shift[a] += d / n as f64;
            }
        }
        let mut total = 0.0;
        for (i, d) in diff.iter_mut().enumerate() {
            let prec = &self.cache[self.zeta[i]].precision;
            for (a, s) in d.iter_mut().zip(&shift).take(factors.len()) {
                *a -= s;
            }
            let mut quad = 0.0;
            let mut lin = 0.0;
            for (a, &j) in factors.iter().enumerate() {
                lin += d[a] * self.scaled[i][j];
                for (b, &l) in factors.iter().enumerate() {
                    quad += d[a] * prec[(j, l)] * d[b];
                }
            }
            total -= lin + 0.5 * quad;
        }
        let mut out = [0.0; R];
        for (a, &j) in factors.iter().enumerate() {
            let (mu, sd) = (self.priors.lambda_mean[j], self.priors.lambda_sd[j]);
            for lam in &self.mix.lambda {
                let (z0, z1) = ((lam[j] - mu) / sd, (lam[j] + shift[a] - mu) / sd);
                total -= 0.5 * (z1 * z1 - z0 * z0);
            }
            out[j] = shift[a];
        }
        (total, out)
    }

    fn apply_block(&mut self, factors: &[usize], shift: &[f64; R]) {
        for lam in &mut self.mix.lambda {
            for &j in factors {
                lam[j] += shift[j];
            }
        }
        for i in 0..self.y.len() {
            let prec = self.cache[self.zeta[i]].precision;
            for &j in factors {
                let new = eval_factor(j, self.x[i], &self.gamma);
                let d = self.m[i][j] - new - shift[j];
                self.m[i][j] = new;
                self.resid[i][j] += d;
                self.scaled[i] += prec.column(j) * d;
            }
        }
    }
}

/// Lloyd's k-means on scaled residuals from k-means++ seeds; starting
/// partition for the mixture.
fn kmeans_labels(resid: &[Vec7], var: &Vec7, h: usize, rng: &mut KernelRng) -> Vec<usize> {
    let n = resid.len();
    if h == 1 {
        return vec![0; n];
    }
    let scale = var.map(|v| 1.0 / v.sqrt());
    let pts: Vec<Vec7> = resid.iter().map(|r| r.component_mul(&scale)).collect();
    let mut centers = vec![pts[rng.random_range(0..n)]];
    while centers.len() < h {
        let d2: Vec<f64> = pts
            .iter()
            .map(|p| centers.iter().map(|c| (p - c).norm_squared()).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            if u < *d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(pts[pick]);
    }
    let mut labels = vec![0; n];
    for _ in 0..25 {
        for (l, p) in labels.iter_mut().zip(&pts) {
            *l = (0..h)
                .min_by(|&a, &b| (p - centers[a]).norm_squared().total_cmp(&(p - centers[b]).norm_squared()))
                .unwrap_or(0);
        }
        let mut sums = vec![(Vec7::zeros(), 0usize); h];
        for (l, p) in labels.iter().zip(&pts) {
            sums[*l].0 += p;
            sums[*l].1 += 1;
        }
        for (c, (s, k)) in centers.iter_mut().zip(sums) {
            if k > 0 {
                *c = s / k as f64;
            }
        }
    }
    labels
}

fn placeholder() -> ChainState {
    ChainState::new(vec![0.0], 0.0).expect("static placeholder")
}
