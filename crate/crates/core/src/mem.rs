//! Two-part measurement error model for daily MVPA on the fourth-root scale.
//!
//! Participation on each observed day is Bernoulli with logit `Z'α + b₁`;
//! positive amounts are Gaussian with mean `Z'β + b₂` and AR(1) covariance
//! `ξ²_i φ_g^{|k−l|}`, with `(b₁, b₂) ~ N(0, Σ_b)`.
//!
//! One sweep of the sampler:
//! 1. α by adaptive random-walk Metropolis (several steps), then an exact
//!    Gaussian draw along the direction that shifts α and every `b₁` while
//!    keeping each linear predictor fixed;
//! 2. each `(b₁, b₂)` by a 2-d adaptive random-walk step;
//! 3. `(β, b₂) | b₁` exactly, integrating `b₂` out for the β draw;
//! 4. each `φ_g` by random walk on `atanh φ`;
//! 5. `Σ_b` by random walk on `(log σ₁, log σ₂, atanh ρ)` three ways: with
//!    the effects held fixed, with the standardized effects held fixed, and
//!    with `b₂` and the standardized `b₁ | b₂` held fixed.

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, SVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statskernel::density::{bernoulli_logit_loglik, half_cauchy_logpdf, inv_logit, LN_2PI};
use statskernel::diagnostics::{gelman_rubin, transpose_traces};
use statskernel::dist::std_normal;
use statskernel::metropolis::{adaptive_rw_metropolis, AdaptiveSettings, ChainState};
use statskernel::rng::{stream_id, stream_rng, KernelRng};
use statskernel::Spd;

pub use crate::ar1::{ar1_stats, build_ar1_cov, Ar1Stats};
use crate::error::{Error, Result};
use crate::ingest::COVARIATE_NAMES;

pub const P: usize = 8;
pub const PRIOR_COEF_VAR: f64 = 1000.0;
const STREAM_MEM: u64 = 0x4D45_4D00;

type Vec8 = SVector<f64, P>;
type Mat8 = SMatrix<f64, P, P>;

/// One participant as seen by the MEM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemUnit {
    pub participant_id: String,
    pub z: [f64; P],
    /// AR(1) group index (0 or 1).
    pub group: usize,
    pub xi_sq: f64,
    /// Number of observed days `J_i`.
    pub observed_days: u8,
    /// Indices of the days with positive MVPA, strictly increasing.
    pub positive_days: Vec<u8>,
    /// Fourth-root MVPA on `positive_days`.
    pub w: Vec<f64>,
}

impl MemUnit {
    pub fn positive_count(&self) -> usize {
        self.w.len()
    }

    fn validate(&self) -> Result<()> {
        if self.w.len() != self.positive_days.len() {
            return Err(Error::Data(format!(
                "participant {}: {} amounts for {} positive days",
                self.participant_id,
                self.w.len(),
                self.positive_days.len()
            )));
        }
        if self.positive_days.len() > self.observed_days as usize {
            return Err(Error::Data(format!(
                "participant {}: more positive days than observed days",
                self.participant_id
            )));
        }
        if self.group > 1 {
            return Err(Error::Data(format!("participant {}: AR(1) group {}", self.participant_id, self.group)));
        }
        if !(self.xi_sq > 0.0) || !self.xi_sq.is_finite() {
            return Err(Error::Data(format!(
                "participant {}: variance {}",
                self.participant_id, self.xi_sq
            )));
        }
        if let Some(w) = self.w.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::Data(format!(
                "participant {}: positive-day amount {w}",
                self.participant_id
            )));
        }
        build_ar1_cov(1.0, 0.0, &self.positive_days).map(|_| ())
    }

    fn stats(&self, phi: &[f64; 2]) -> Ar1Stats {
        ar1_stats(&self.w, &self.positive_days, self.xi_sq, phi[self.group])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemParams {
    pub alpha: [f64; P],
    pub beta: [f64; P],
    pub phi: [f64; 2],
    pub sigma_b: [f64; 2],
    pub rho: f64,
}

impl MemParams {
    pub fn sigma_b_matrix(&self) -> Matrix2<f64> {
        let (s1, s2) = (self.sigma_b[0], self.sigma_b[1]);
        Matrix2::new(s1 * s1, self.rho * s1 * s2, self.rho * s1 * s2, s2 * s2)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PARAM_COUNT);
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.phi);
        v.extend_from_slice(&self.sigma_b);
        v.push(self.rho);
        v
    }

    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != PARAM_COUNT {
            return Err(Error::Data(format!("expected {PARAM_COUNT} MEM parameters, got {}", v.len())));
        }
        let mut p = MemParams {
            alpha: [0.0; P],
            beta: [0.0; P],
            phi: [v[16], v[17]],
            sigma_b: [v[18], v[19]],
            rho: v[20],
        };
        p.alpha.copy_from_slice(&v[..8]);
        p.beta.copy_from_slice(&v[8..16]);
        Ok(p)
    }
}

pub const PARAM_COUNT: usize = 21;

pub fn param_names() -> Vec<String> {
    let mut n = Vec::with_capacity(PARAM_COUNT);
    n.extend(COVARIATE_NAMES.iter().map(|c| format!("alpha_{c}")));
    n.extend(COVARIATE_NAMES.iter().map(|c| format!("beta_{c}")));
    n.extend(["phi_1", "phi_2", "sigma_b1", "sigma_b2", "rho_b"].map(String::from));
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

fn dot8(z: &[f64; P], c: &[f64; P]) -> f64 {
    z.iter().zip(c).map(|(a, b)| a * b).sum()
}

/// `log N₂((b₁, b₂); 0, Σ_b)`.
fn re_logpdf(b1: f64, b2: f64, s1: f64, s2: f64, rho: f64) -> f64 {
    let one_m = 1.0 - rho * rho;
    let (x, y) = (b1 / s1, b2 / s2);
    -LN_2PI - s1.ln() - s2.ln() - 0.5 * one_m.ln() - (x * x - 2.0 * rho * x * y + y * y) / (2.0 * one_m)
}

fn coef_prior(c: &[f64; P]) -> f64 {
    c.iter()
        .map(|v| -0.5 * (LN_2PI + PRIOR_COEF_VAR.ln() + v * v / PRIOR_COEF_VAR))
        .sum()
}

/// Log prior of `(φ, σ_b, ρ)`: uniform φ_g on (−1, 1), half-Cauchy(0, 1)
/// scales and the LKJ(1) density 1/2 of a 2×2 correlation.
fn variance_prior(phi: &[f64; 2], sigma_b: &[f64; 2], rho: f64) -> f64 {
    if phi.iter().any(|p| !(p.abs() < 1.0)) || !(rho.abs() < 1.0) || sigma_b.iter().any(|s| !(*s > 0.0)) {
        return f64::NEG_INFINITY;
    }
    2.0 * 0.5f64.ln() + half_cauchy_logpdf(sigma_b[0], 1.0) + half_cauchy_logpdf(sigma_b[1], 1.0) + 0.5f64.ln()
}

fn unit_loglik(unit: &MemUnit, st: &Ar1Stats, eta1: f64, eta2: f64) -> f64 {
    let k = unit.positive_count() as f64;
    bernoulli_logit_loglik(k, f64::from(unit.observed_days), eta1) + st.loglik(eta2)
}

/// Full log posterior (up to the constant of the improper nothing: every
/// prior term is normalized).
pub fn mem_log_posterior(params: &MemParams, effects: &RandomEffects, units: &[MemUnit]) -> f64 {
    let prior = coef_prior(&params.alpha) + coef_prior(&params.beta)
        + variance_prior(&params.phi, &params.sigma_b, params.rho);
    if !prior.is_finite() {
        return f64::NEG_INFINITY;
    }
    prior + mem_log_likelihood(params, effects, units)
}

/// Data plus random-effect terms of the log posterior.
pub fn mem_log_likelihood(params: &MemParams, effects: &RandomEffects, units: &[MemUnit]) -> f64 {
    let [s1, s2] = params.sigma_b;
    units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let st = u.stats(&params.phi);
            let (b1, b2) = (effects.b1[i], effects.b2[i]);
            unit_loglik(u, &st, dot8(&u.z, &params.alpha) + b1, dot8(&u.z, &params.beta) + b2)
                + re_logpdf(b1, b2, s1, s2, params.rho)
        })
        .sum()
}

/// Usual daily MVPA in minutes:
/// `logit⁻¹(η₁) · (η₂⁴ + 6 ξ² η₂²)`.
pub fn usual_mvpa(eta1: f64, eta2: f64, xi_sq: f64) -> f64 {
    let e2 = eta2 * eta2;
    (inv_logit(eta1) * (e2 * e2 + 6.0 * xi_sq * e2)).max(0.0)
}

/// Usual MVPA of one participant under a parameter draw and its effects.
pub fn participant_usual_mvpa(z: &[f64; P], xi_sq: f64, params: &MemParams, b1: f64, b2: f64) -> f64 {
    usual_mvpa(dot8(z, &params.alpha) + b1, dot8(z, &params.beta) + b2, xi_sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemSettings {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    /// Random-walk steps on α per sweep.
    pub alpha_steps: usize,
    /// Steps of each Σ_b move per sweep.
    pub sigma_steps: usize,
    pub rhat_threshold: f64,
    /// Standard deviation of the initial-value jitter.
    pub init_jitter: f64,
    /// Approximate number of retained draws whose random effects and usual
    /// MVPA are stored, evenly strided within each chain; 0 keeps all.
    pub t_pool: usize,
}

impl Default for MemSettings {
    fn default() -> Self {
        Self {
            chains: 8,
            iterations: 2000,
            burn_in: 1000,
            alpha_steps: 3,
            sigma_steps: 2,
            rhat_threshold: 1.1,
            init_jitter: 0.25,
            t_pool: 1000,
        }
    }
}

impl MemSettings {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 2 {
            return Err(Error::Config("mem.chains must be at least 2".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(Error::Config("mem.burn_in must be below mem.iterations".into()));
        }
        if self.iterations - self.burn_in < 10 {
            return Err(Error::Config("mem needs at least 10 retained draws per chain".into()));
        }
        if self.alpha_steps == 0 || self.sigma_steps == 0 {
            return Err(Error::Config("mem.alpha_steps and mem.sigma_steps must be positive".into()));
        }
        Ok(())
    }

    /// Spacing between stored draws within a chain.
    pub fn pool_stride(&self) -> usize {
        let total = (self.iterations - self.burn_in) * self.chains;
        if self.t_pool == 0 { 1 } else { (total / self.t_pool).max(1) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemPosterior {
    pub participant_ids: Vec<String>,
    pub chains: usize,
    pub draws_per_chain: usize,
    /// Chain-major parameter draws.
    pub draws: Vec<MemParams>,
    /// Indices into `draws` of the stored pool.
    pub pool: Vec<usize>,
    /// Usual MVPA (minutes) per pool draw.
    pub t: Vec<Vec<f64>>,
    pub pool_b1: Vec<Vec<f64>>,
    pub pool_b2: Vec<Vec<f64>>,
    pub b1_mean: Vec<f64>,
    pub b2_mean: Vec<f64>,
    pub pi_mean: Vec<f64>,
    /// Usual MVPA averaged over every retained draw.
    pub t_mean: Vec<f64>,
    pub rhat: Vec<(String, f64)>,
    pub acceptance: Vec<(String, f64)>,
}

impl MemPosterior {
    /// Pool draws × participants matrix of usual MVPA.
    pub fn posterior_of_t(&self) -> &[Vec<f64>] {
        &self.t
    }

    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Errors listing every parameter whose R̂ exceeds `threshold`.
    pub fn check_convergence(&self, threshold: f64) -> Result<()> {
        let offenders: Vec<(String, f64)> = self
            .rhat
            .iter()
            .filter(|(_, r)| !(*r <= threshold))
            .cloned()
            .collect();
        if offenders.is_empty() {
            Ok(())
        } else {
            Err(Error::Convergence { threshold, offenders })
        }
    }

    pub fn param_trace(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.chains)
            .map(|c| {
                self.draws[c * self.draws_per_chain..(c + 1) * self.draws_per_chain]
                    .iter()
                    .map(|d| d.flatten()[k])
                    .collect()
            })
            .collect()
    }
}

/// Runs the sampler and fails when any R̂ exceeds the configured threshold.
pub fn sample_mem(units: &[MemUnit], settings: &MemSettings, seed: u64) -> Result<MemPosterior> {
    let post = run_mem(units, settings, seed)?;
    post.check_convergence(settings.rhat_threshold)?;
    Ok(post)
}

struct ChainOutput {
    draws: Vec<MemParams>,
    pool: Vec<usize>,
    t: Vec<Vec<f64>>,
    pool_b1: Vec<Vec<f64>>,
    pool_b2: Vec<Vec<f64>>,
    b1_sum: Vec<f64>,
    b2_sum: Vec<f64>,
    pi_sum: Vec<f64>,
    t_sum: Vec<f64>,
    acceptance: Vec<(String, f64)>,
}

/// Runs all chains without the convergence check.
pub fn run_mem(units: &[MemUnit], settings: &MemSettings, seed: u64) -> Result<MemPosterior> {
    settings.validate()?;
    if units.is_empty() {
        return Err(Error::Data("MEM cohort is empty".into()));
    }
    for u in units {
        u.validate()?;
    }
    let outputs: Vec<Result<ChainOutput>> = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, stream_id(&[STREAM_MEM, c as u64]));
            Chain::new(units, settings, &mut rng)?.run(settings, &mut rng)
        })
        .collect();
    let outputs: Vec<ChainOutput> = outputs.into_iter().collect::<Result<_>>()?;
    let keep = settings.iterations - settings.burn_in;
    let total = (keep * settings.chains) as f64;
    let n = units.len();
    let mut b1_mean = vec![0.0; n];
    let mut b2_mean = vec![0.0; n];
    let mut pi_mean = vec![0.0; n];
    let mut t_mean = vec![0.0; n];
    let mut draws = Vec::with_capacity(keep * settings.chains);
    let (mut pool, mut t, mut pool_b1, mut pool_b2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut acceptance = Vec::new();
    for (c, o) in outputs.into_iter().enumerate() {
        for i in 0..n {
            b1_mean[i] += o.b1_sum[i] / total;
            b2_mean[i] += o.b2_sum[i] / total;
            pi_mean[i] += o.pi_sum[i] / total;
            t_mean[i] += o.t_sum[i] / total;
        }
        draws.extend(o.draws);
        pool.extend(o.pool.into_iter().map(|k| c * keep + k));
        t.extend(o.t);
        pool_b1.extend(o.pool_b1);
        pool_b2.extend(o.pool_b2);
        acceptance.extend(o.acceptance.into_iter().map(|(k, v)| (format!("chain{c}.{k}"), v)));
    }
    let chains_flat: Vec<Vec<Vec<f64>>> = draws
        .chunks(keep)
        .map(|ch| ch.iter().map(|d| d.flatten()).collect())
        .collect();
    let rhat = gelman_rubin(&chains_flat)?;
    let names = param_names();
    Ok(MemPosterior {
        participant_ids: units.iter().map(|u| u.participant_id.clone()).collect(),
        chains: settings.chains,
        draws_per_chain: keep,
        draws,
        pool,
        t,
        pool_b1,
        pool_b2,
        b1_mean,
        b2_mean,
        pi_mean,
        t_mean,
        rhat: names.into_iter().zip(rhat.values).collect(),
        acceptance,
    })
}

/// Per-chain sampler state.
struct Chain<'a> {
    units: &'a [MemUnit],
    params: MemParams,
    b1: Vec<f64>,
    b2: Vec<f64>,
    stats: Vec<Ar1Stats>,
    alpha_state: ChainState,
    b_states: Vec<ChainState>,
    phi_states: [ChainState; 2],
    sigma_state: ChainState,
    sigma_nc_state: ChainState,
    sigma_pc_state: ChainState,
    adapt: AdaptiveSettings,
}

impl<'a> Chain<'a> {
    fn new(units: &'a [MemUnit], settings: &MemSettings, rng: &mut KernelRng) -> Result<Self> {
        let n = units.len();
        let jitter = Normal::new(0.0, settings.init_jitter.max(0.0))
            .map_err(|e| Error::Config(format!("mem.init_jitter: {e}")))?;
        // Crude moment starts, jittered per chain.
        let (mut pos, mut obs) = (0.0, 0.0);
        let (mut wsum, mut wn) = (0.0, 0.0);
        for u in units {
            pos += u.positive_count() as f64;
            obs += f64::from(u.observed_days);
            wsum += u.w.iter().sum::<f64>();
            wn += u.w.len() as f64;
        }
        let pbar = ((pos + 0.5) / (obs + 1.0)).clamp(0.02, 0.98);
        let zbar: Vec<f64> = (0..P).map(|k| units.iter().map(|u| u.z[k]).sum::<f64>() / n as f64).collect();
        let mut alpha = [0.0; P];
        let mut beta = [0.0; P];
        for k in 1..P {
            alpha[k] = jitter.sample(rng) * 0.5;
            beta[k] = jitter.sample(rng) * 0.5;
        }
        let wbar = if wn > 0.0 { wsum / wn } else { 1.0 };
        alpha[0] = (pbar / (1.0 - pbar)).ln() + jitter.sample(rng)
            - (1..P).map(|k| alpha[k] * zbar[k]).sum::<f64>();
        beta[0] = wbar + jitter.sample(rng) * 0.5 - (1..P).map(|k| beta[k] * zbar[k]).sum::<f64>();
        let phi = [
            rng.random_range(-0.2..0.6),
            rng.random_range(-0.2..0.6),
        ];
        let sigma_b = [
            0.5 * (jitter.sample(rng)).exp(),
            0.3 * (jitter.sample(rng)).exp(),
        ];
        let params = MemParams {
            alpha,
            beta,
            phi,
            sigma_b,
            rho: rng.random_range(-0.3..0.3),
        };
        let stats: Vec<Ar1Stats> = units.iter().map(|u| u.stats(&params.phi)).collect();
        let adapt = AdaptiveSettings::with_burn_in(settings.burn_in);

        // α starts from the Fisher information at the pooled participation rate.
        let mut info = Mat8::identity() / PRIOR_COEF_VAR;
        for u in units {
            let z = Vec8::from_row_slice(&u.z);
            info += z * z.transpose() * (f64::from(u.observed_days) * pbar * (1.0 - pbar));
        }
        let alpha_cov = info
            .try_inverse()
            .ok_or_else(|| Error::Data("participation design is singular".into()))?;
        let mut alpha_state = ChainState::new(alpha.to_vec(), 0.0)?;
        let scaled = DMatrix::from_fn(P, P, |i, j| alpha_cov[(i, j)] * 2.4 * 2.4 / P as f64);
        alpha_state.set_proposal(&Spd::new(statskernel::dist::symmetrize(scaled))?)?;

        let b_states = (0..n)
            .map(|_| ChainState::with_proposal_sd(vec![0.0, 0.0], 0.0, &[0.5, 0.3]))
            .collect::<statskernel::Result<Vec<_>>>()?;
        let phi_states = [
            ChainState::with_proposal_sd(vec![params.phi[0].atanh()], 0.0, &[0.1])?,
            ChainState::with_proposal_sd(vec![params.phi[1].atanh()], 0.0, &[0.1])?,
        ];
        let sigma_pos = vec![sigma_b[0].ln(), sigma_b[1].ln(), params.rho.atanh()];
        let sigma_state = ChainState::with_proposal_sd(sigma_pos.clone(), 0.0, &[0.05, 0.05, 0.1])?;
        let sigma_nc_state = ChainState::with_proposal_sd(sigma_pos.clone(), 0.0, &[0.05, 0.05, 0.1])?;
        let sigma_pc_state = ChainState::with_proposal_sd(sigma_pos, 0.0, &[0.05, 0.05, 0.1])?;
        Ok(Self {
            units,
            params,
            b1: vec![0.0; n],
            b2: vec![0.0; n],
            stats,
            alpha_state,
            b_states,
            phi_states,
            sigma_state,
            sigma_nc_state,
            sigma_pc_state,
            adapt,
        })
    }

    fn run(mut self, settings: &MemSettings, rng: &mut KernelRng) -> Result<ChainOutput> {
        let n = self.units.len();
        let keep = settings.iterations - settings.burn_in;
        let mut out = ChainOutput {
            draws: Vec::with_capacity(keep),
            pool: Vec::new(),
            t: Vec::new(),
            pool_b1: Vec::new(),
            pool_b2: Vec::new(),
            b1_sum: vec![0.0; n],
            b2_sum: vec![0.0; n],
            pi_sum: vec![0.0; n],
            t_sum: vec![0.0; n],
            acceptance: Vec::new(),
        };
        // Effects start at their conditional means under the starting values.
        self.draw_beta_b2(rng)?;
        let stride = settings.pool_stride();
        for it in 0..settings.iterations {
            for _ in 0..settings.alpha_steps {
                self.step_alpha(rng);
            }
            self.shift_alpha(rng)?;
            self.step_effects(rng);
            self.draw_beta_b2(rng)?;
            self.step_phi(rng);
            for _ in 0..settings.sigma_steps {
                self.step_sigma(rng);
                self.step_sigma_noncentered(rng);
                self.step_sigma_conditional(rng);
            }
            if it >= settings.burn_in {
                let k = it - settings.burn_in;
                out.draws.push(self.params);
                let mut t = Vec::with_capacity(n);
                for (i, u) in self.units.iter().enumerate() {
                    let eta1 = dot8(&u.z, &self.params.alpha) + self.b1[i];
                    let eta2 = dot8(&u.z, &self.params.beta) + self.b2[i];
                    let ti = usual_mvpa(eta1, eta2, u.xi_sq);
                    t.push(ti);
                    out.b1_sum[i] += self.b1[i];
                    out.b2_sum[i] += self.b2[i];
                    out.pi_sum[i] += inv_logit(eta1);
                    out.t_sum[i] += ti;
                }
                if k % stride == 0 {
                    out.pool.push(k);
                    out.t.push(t);
                    out.pool_b1.push(self.b1.clone());
                    out.pool_b2.push(self.b2.clone());
                }
            }
        }
        let mean_b_acc = self.b_states.iter().map(|s| s.acceptance_rate()).sum::<f64>() / n as f64;
        out.acceptance = vec![
            ("alpha".into(), self.alpha_state.acceptance_rate()),
            ("b".into(), mean_b_acc),
            ("phi_1".into(), self.phi_states[0].acceptance_rate()),
            ("phi_2".into(), self.phi_states[1].acceptance_rate()),
            ("sigma_b".into(), self.sigma_state.acceptance_rate()),
            ("sigma_b_noncentered".into(), self.sigma_nc_state.acceptance_rate()),
            ("sigma_b_conditional".into(), self.sigma_pc_state.acceptance_rate()),
        ];
        Ok(out)
    }

    fn alpha_target(&self, alpha: &[f64]) -> f64 {
        let a: &[f64; P] = alpha.try_into().expect("α has 8 components");
        let mut lp = coef_prior(a);
        for (i, u) in self.units.iter().enumerate() {
            let eta1 = dot8(&u.z, a) + self.b1[i];
            lp += bernoulli_logit_loglik(u.positive_count() as f64, f64::from(u.observed_days), eta1);
        }
        lp
    }

    fn step_alpha(&mut self, rng: &mut KernelRng) {
        self.alpha_state.position.copy_from_slice(&self.params.alpha);
        self.alpha_state.log_target = self.alpha_target(&self.params.alpha);
        let mut state = std::mem::replace(&mut self.alpha_state, placeholder());
        adaptive_rw_metropolis(|a| self.alpha_target(a), &mut state, &self.adapt, rng);
        self.params.alpha.copy_from_slice(&state.position);
        self.alpha_state = state;
    }

    /// Exact draw of δ in `α + δ`, `b₁ᵢ − Z_iᵀδ`: every `η₁` is unchanged, so
    /// only the prior on α and the conditional of `b₁ | b₂` move.
    fn shift_alpha(&mut self, rng: &mut KernelRng) -> Result<()> {
        let [s1, s2] = self.params.sigma_b;
        let rho = self.params.rho;
        let c = rho * s1 / s2;
        let v1 = s1 * s1 * (1.0 - rho * rho);
        let a0 = Vec8::from_row_slice(&self.params.alpha);
        let mut prec = Mat8::identity() / PRIOR_COEF_VAR;
        let mut lin = -a0 / PRIOR_COEF_VAR;
        for (i, u) in self.units.iter().enumerate() {
            let z = Vec8::from_row_slice(&u.z);
            prec += z * z.transpose() / v1;
            lin += z * ((self.b1[i] - c * self.b2[i]) / v1);
        }
        let delta = draw_gaussian8(&prec, &lin, rng)?;
        for (k, a) in self.params.alpha.iter_mut().enumerate() {
            *a += delta[k];
        }
        let d: [f64; P] = delta.into();
        for (i, u) in self.units.iter().enumerate() {
            self.b1[i] -= dot8(&u.z, &d);
        }
        Ok(())
    }

    fn step_effects(&mut self, rng: &mut KernelRng) {
        let [s1, s2] = self.params.sigma_b;
        let rho = self.params.rho;
        for (i, u) in self.units.iter().enumerate() {
            let za = dot8(&u.z, &self.params.alpha);
            let zb = dot8(&u.z, &self.params.beta);
            let st = &self.stats[i];
            let target = |b: &[f64]| unit_loglik(u, st, za + b[0], zb + b[1]) + re_logpdf(b[0], b[1], s1, s2, rho);
            let state = &mut self.b_states[i];
            state.position[0] = self.b1[i];
            state.position[1] = self.b2[i];
            state.log_target = target(&state.position);
            adaptive_rw_metropolis(target, state, &self.adapt, rng);
            self.b1[i] = state.position[0];
            self.b2[i] = state.position[1];
        }
    }

    /// `β | b₁` with `b₂` integrated out, then `b₂ | β, b₁` per participant.
    fn draw_beta_b2(&mut self, rng: &mut KernelRng) -> Result<()> {
        let [s1, s2] = self.params.sigma_b;
        let rho = self.params.rho;
        let c = rho * s2 / s1;
        let v = s2 * s2 * (1.0 - rho * rho);
        let mut prec = Mat8::identity() / PRIOR_COEF_VAR;
        let mut lin = Vec8::zeros();
        for (i, u) in self.units.iter().enumerate() {
            let st = &self.stats[i];
            let denom = 1.0 + v * st.s;
            let (a, g) = (st.s / denom, st.u / denom);
            let z = Vec8::from_row_slice(&u.z);
            prec += z * z.transpose() * a;
            lin += z * (g - a * c * self.b1[i]);
        }
        let beta = draw_gaussian8(&prec, &lin, rng)?;
        self.params.beta.copy_from_slice(beta.as_slice());
        for (i, u) in self.units.iter().enumerate() {
            let st = &self.stats[i];
            let zb = dot8(&u.z, &self.params.beta);
            let p = 1.0 / v + st.s;
            let mean = (c * self.b1[i] / v + st.u - st.s * zb) / p;
            self.b2[i] = mean + std_normal(rng) / p.sqrt();
        }
        Ok(())
    }

    fn step_phi(&mut self, rng: &mut KernelRng) {
        for g in 0..2 {
            let members: Vec<usize> = (0..self.units.len()).filter(|&i| self.units[i].group == g).collect();
            let mu: Vec<f64> = members
                .iter()
                .map(|&i| dot8(&self.units[i].z, &self.params.beta) + self.b2[i])
                .collect();
            let units = self.units;
            let target = |x: &[f64]| {
                let phi = x[0].tanh();
                let mut lp = (1.0 - phi * phi).ln();
                for (k, &i) in members.iter().enumerate() {
                    let u = &units[i];
                    lp += ar1_stats(&u.w, &u.positive_days, u.xi_sq, phi).loglik(mu[k]);
                }
                lp
            };
            let state = &mut self.phi_states[g];
            state.position[0] = self.params.phi[g].atanh();
            state.log_target = target(&state.position);
            adaptive_rw_metropolis(target, state, &self.adapt, rng);
            let phi = state.position[0].tanh();
            if phi != self.params.phi[g] {
                self.params.phi[g] = phi;
                for &i in &members {
                    self.stats[i] = self.units[i].stats(&self.params.phi);
                }
            }
        }
    }

    fn sigma_prior_jacobian(x: &[f64]) -> (f64, f64, f64, f64) {
        let (s1, s2, rho) = (x[0].exp(), x[1].exp(), x[2].tanh());
        let lp = half_cauchy_logpdf(s1, 1.0) + half_cauchy_logpdf(s2, 1.0) + 0.5f64.ln()
            + x[0] + x[1] + (1.0 - rho * rho).ln();
        (s1, s2, rho, lp)
    }

    fn step_sigma(&mut self, rng: &mut KernelRng) {
        let (b1, b2) = (&self.b1, &self.b2);
        let target = |x: &[f64]| {
            let (s1, s2, rho, lp) = Self::sigma_prior_jacobian(x);
            if !(rho.abs() < 1.0) || !lp.is_finite() {
                return f64::NEG_INFINITY;
            }
            lp + b1.iter().zip(b2).map(|(a, b)| re_logpdf(*a, *b, s1, s2, rho)).sum::<f64>()
        };
        let p = &self.params;
        let state = &mut self.sigma_state;
        state.position.copy_from_slice(&[p.sigma_b[0].ln(), p.sigma_b[1].ln(), p.rho.atanh()]);
        state.log_target = target(&state.position);
        adaptive_rw_metropolis(target, state, &self.adapt, rng);
        let x = &state.position;
        self.params.sigma_b = [x[0].exp(), x[1].exp()];
        self.params.rho = x[2].tanh();
    }

    /// Random walk on Σ_b holding `L⁻¹ b` fixed, with `L` the Cholesky factor
    /// of Σ_b; the data likelihood moves and the effect density does not.
    fn step_sigma_noncentered(&mut self, rng: &mut KernelRng) {
        let p0 = self.params;
        let (s1, s2, rho) = (p0.sigma_b[0], p0.sigma_b[1], p0.rho);
        let r = (1.0 - rho * rho).sqrt();
        let e: Vec<(f64, f64)> = self
            .b1
            .iter()
            .zip(&self.b2)
            .map(|(b1, b2)| {
                let e1 = b1 / s1;
                (e1, (b2 / s2 - rho * e1) / r)
            })
            .collect();
        let za: Vec<f64> = self.units.iter().map(|u| dot8(&u.z, &p0.alpha)).collect();
        let zb: Vec<f64> = self.units.iter().map(|u| dot8(&u.z, &p0.beta)).collect();
        let (units, stats) = (self.units, &self.stats);
        let effects = |x: &[f64], k: usize| {
            let (s1, s2, rho) = (x[0].exp(), x[1].exp(), x[2].tanh());
            let (e1, e2) = e[k];
            (s1 * e1, s2 * (rho * e1 + (1.0 - rho * rho).sqrt() * e2))
        };
        let target = |x: &[f64]| {
            let (s1, s2, rho, lp) = Self::sigma_prior_jacobian(x);
            if !(rho.abs() < 1.0) || !lp.is_finite() {
                return f64::NEG_INFINITY;
            }
            let r = (1.0 - rho * rho).sqrt();
            lp + units
                .iter()
                .enumerate()
                .map(|(k, u)| {
                    let (e1, e2) = e[k];
                    unit_loglik(u, &stats[k], za[k] + s1 * e1, zb[k] + s2 * (rho * e1 + r * e2))
                })
                .sum::<f64>()
        };
        let state = &mut self.sigma_nc_state;
        state.position.copy_from_slice(&[s1.ln(), s2.ln(), rho.atanh()]);
        state.log_target = target(&state.position);
        adaptive_rw_metropolis(target, state, &self.adapt, rng);
        let x = state.position.clone();
        if x[0] != s1.ln() || x[1] != s2.ln() || x[2] != rho.atanh() {
            for k in 0..self.units.len() {
                let (b1, b2) = effects(&x, k);
                self.b1[k] = b1;
                self.b2[k] = b2;
            }
            self.params.sigma_b = [x[0].exp(), x[1].exp()];
            self.params.rho = x[2].tanh();
        }
    }
}

impl Chain<'_> {
    /// Random walk on Σ_b holding `b₂` and `(b₁ − E[b₁|b₂]) / sd(b₁|b₂)`
    /// fixed; only the participation likelihood and the `b₂` density move.
    fn step_sigma_conditional(&mut self, rng: &mut KernelRng) {
        let p0 = self.params;
        let (s1, s2, rho) = (p0.sigma_b[0], p0.sigma_b[1], p0.rho);
        let sd1 = s1 * (1.0 - rho * rho).sqrt();
        let u: Vec<f64> = self
            .b1
            .iter()
            .zip(&self.b2)
            .map(|(b1, b2)| (b1 - rho * s1 / s2 * b2) / sd1)
            .collect();
        let za: Vec<f64> = self.units.iter().map(|u| dot8(&u.z, &p0.alpha)).collect();
        let (units, b2) = (self.units, &self.b2);
        let b1_of = |x: &[f64], k: usize| {
            let (s1, s2, rho) = (x[0].exp(), x[1].exp(), x[2].tanh());
            rho * s1 / s2 * b2[k] + s1 * (1.0 - rho * rho).sqrt() * u[k]
        };
        let target = |x: &[f64]| {
            let (s1, s2, rho, lp) = Self::sigma_prior_jacobian(x);
            if !(rho.abs() < 1.0) || !lp.is_finite() {
                return f64::NEG_INFINITY;
            }
            let (c, sd1, ln_s2) = (rho * s1 / s2, s1 * (1.0 - rho * rho).sqrt(), s2.ln());
            lp + units
                .iter()
                .enumerate()
                .map(|(k, un)| {
                    let z = b2[k] / s2;
                    -0.5 * (LN_2PI + z * z) - ln_s2
                        + bernoulli_logit_loglik(
                            un.positive_count() as f64,
                            f64::from(un.observed_days),
                            za[k] + c * b2[k] + sd1 * u[k],
                        )
                })
                .sum::<f64>()
        };
        let state = &mut self.sigma_pc_state;
        state.position.copy_from_slice(&[s1.ln(), s2.ln(), rho.atanh()]);
        state.log_target = target(&state.position);
        let step = adaptive_rw_metropolis(target, state, &self.adapt, rng);
        if matches!(step, statskernel::Step::Accepted) {
            let x = state.position.clone();
            for k in 0..self.units.len() {
                self.b1[k] = b1_of(&x, k);
            }
            self.params.sigma_b = [x[0].exp(), x[1].exp()];
            self.params.rho = x[2].tanh();
        }
    }
}

fn placeholder() -> ChainState {
    ChainState::new(vec![0.0], 0.0).expect("static placeholder")
}

/// Draws from `N(P⁻¹ h, P⁻¹)` given precision `P` and linear term `h`.
fn draw_gaussian8(prec: &Mat8, lin: &Vec8, rng: &mut KernelRng) -> Result<Vec8> {
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::Data("coefficient precision is not positive definite".into()))?;
    let mean = chol.solve(lin);
    let z = Vec8::from_fn(|_, _| std_normal(rng));
    // L Lᵀ = P, so Lᵀ x = z has covariance P⁻¹.
    let x = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::Data("singular coefficient precision".into()))?;
    Ok(mean + x)
}

/// Traces `[chain][draw][param]` of the MEM parameters.
pub fn traces(post: &MemPosterior) -> Vec<Vec<Vec<f64>>> {
    post.draws
        .chunks(post.draws_per_chain)
        .map(|ch| ch.iter().map(|d| d.flatten()).collect())
        .collect()
}

/// Parameter-major traces `[chain][param][draw]`.
pub fn traces_by_param(post: &MemPosterior) -> Vec<Vec<Vec<f64>>> {
    transpose_traces(&traces(post), PARAM_COUNT).expect("fixed parameter count")
}

/// Dense check of a participant's Gaussian block, used by tests.
pub fn dense_gaussian_loglik(unit: &MemUnit, phi: f64, mean: f64) -> Result<f64> {
    if unit.w.is_empty() {
        return Ok(0.0);
    }
    let cov = build_ar1_cov(unit.xi_sq, phi, &unit.positive_days)?;
    let spd = Spd::new(cov)?;
    let w = DVector::from_row_slice(&unit.w);
    Ok(statskernel::density::mvn_logpdf(&w, &DVector::from_element(w.len(), mean), &spd))
}
