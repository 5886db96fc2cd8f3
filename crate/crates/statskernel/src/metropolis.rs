//! Adaptive random-walk Metropolis.
//!
//! Burn-in is split in two. During the first `phase_one_fraction` of it the
//! proposal is the initial covariance, with a scalar Robbins–Monro factor
//! steering acceptance toward `target_acceptance`. Afterwards the proposal is
//! `2.4² / d` times the empirical covariance of the draws seen since phase
//! one ended, refreshed every `interval` iterations and once more at the end
//! of burn-in. From then on the kernel is fixed.

use nalgebra::DMatrix;
use rand::Rng;

use crate::dist::std_normal;
use crate::error::{KernelError, Result};
use crate::linalg::Spd;

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSettings {
    pub burn_in: usize,
    pub phase_one_fraction: f64,
    pub interval: usize,
    pub target_acceptance: f64,
    /// Relative ridge added to the empirical covariance.
    pub ridge: f64,
}

impl Default for AdaptiveSettings {
    fn default() -> Self {
        Self {
            burn_in: 1000,
            phase_one_fraction: 0.2,
            interval: 500,
            target_acceptance: 0.234,
            ridge: 1e-6,
        }
    }
}

impl AdaptiveSettings {
    pub fn with_burn_in(burn_in: usize) -> Self {
        Self {
            burn_in,
            ..Self::default()
        }
    }

    fn phase_one_end(&self) -> usize {
        (self.burn_in as f64 * self.phase_one_fraction).round() as usize
    }
}

/// Default initial proposal covariance, `0.1 · I`.
pub const INITIAL_PROPOSAL_VARIANCE: f64 = 0.1;

/// State of one chain for one parameter block.
///
/// The RNG lives with the caller so that several blocks of one chain can
/// share a stream.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub position: Vec<f64>,
    /// Log target at `position`. Callers whose target depends on other
    /// blocks must refresh this before stepping.
    pub log_target: f64,
    /// Row-major lower Cholesky factor of the proposal covariance.
    factor: Vec<f64>,
    pub scale: f64,
    pub accepted: u64,
    pub iterations: u64,
    pub nan_rejections: u64,
    welford_n: u64,
    welford_mean: Vec<f64>,
    welford_m2: Vec<f64>,
    proposal: Vec<f64>,
    scratch: Vec<f64>,
}

impl ChainState {
    pub fn new(position: Vec<f64>, log_target: f64) -> Result<Self> {
        let sd = vec![INITIAL_PROPOSAL_VARIANCE.sqrt(); position.len()];
        Self::with_proposal_sd(position, log_target, &sd)
    }

    /// Starts with a diagonal proposal of the given standard deviations.
    pub fn with_proposal_sd(position: Vec<f64>, log_target: f64, sd: &[f64]) -> Result<Self> {
        let d = position.len();
        if sd.len() != d {
            return Err(KernelError::DimensionMismatch {
                expected: d,
                got: sd.len(),
            });
        }
        if d == 0 {
            return Err(KernelError::InvalidParameter("empty parameter block".into()));
        }
        if !log_target.is_finite() {
            return Err(KernelError::InvalidParameter(format!(
                "log target {log_target} at the initial state"
            )));
        }
        if let Some(s) = sd.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(KernelError::InvalidParameter(format!("proposal sd {s}")));
        }
        let mut factor = vec![0.0; d * d];
        for (i, s) in sd.iter().enumerate() {
            factor[i * d + i] = *s;
        }
        Ok(Self {
            position,
            log_target,
            factor,
            scale: 1.0,
            accepted: 0,
            iterations: 0,
            nan_rejections: 0,
            welford_n: 0,
            welford_mean: vec![0.0; d],
            welford_m2: vec![0.0; d * d],
            proposal: vec![0.0; d],
            scratch: vec![0.0; d],
        })
    }

    pub fn dim(&self) -> usize {
        self.position.len()
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.iterations == 0 {
            0.0
        } else {
            self.accepted as f64 / self.iterations as f64
        }
    }

    /// Current proposal covariance including the scalar factor.
    pub fn proposal_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let l = DMatrix::from_row_slice(d, d, &self.factor);
        (&l * l.transpose()) * (self.scale * self.scale)
    }

    /// Replaces the proposal covariance.
    pub fn set_proposal(&mut self, cov: &Spd) -> Result<()> {
        let d = self.dim();
        if cov.dim() != d {
            return Err(KernelError::DimensionMismatch {
                expected: d,
                got: cov.dim(),
            });
        }
        let l = cov.factor();
        for i in 0..d {
            for j in 0..d {
                self.factor[i * d + j] = l[(i, j)];
            }
        }
        Ok(())
    }

    fn welford_push(&mut self) {
        let d = self.dim();
        self.welford_n += 1;
        let n = self.welford_n as f64;
        for k in 0..d {
            self.scratch[k] = self.position[k] - self.welford_mean[k];
            self.welford_mean[k] += self.scratch[k] / n;
        }
        for i in 0..d {
            let after_i = self.position[i] - self.welford_mean[i];
            for j in 0..d {
                self.welford_m2[i * d + j] += self.scratch[j] * after_i;
            }
        }
    }

    /// Rebuilds the proposal from the accumulated draws. Keeps the current
    /// one when too few draws exist or the estimate is singular.
    fn refresh_from_empirical(&mut self, ridge: f64) {
        let d = self.dim();
        if self.welford_n < (d as u64 + 2) {
            return;
        }
        let denom = (self.welford_n - 1) as f64;
        let mut cov = DMatrix::from_fn(d, d, |i, j| {
            0.5 * (self.welford_m2[i * d + j] + self.welford_m2[j * d + i]) / denom
        });
        let mean_diag = cov.diagonal().mean();
        if !(mean_diag > 0.0) || !mean_diag.is_finite() {
            return;
        }
        for i in 0..d {
            cov[(i, i)] += ridge * mean_diag;
        }
        cov *= 2.4 * 2.4 / d as f64;
        if let Ok(spd) = Spd::new(cov) {
            if self.set_proposal(&spd).is_ok() {
                self.scale = 1.0;
            }
        }
    }
}

/// Outcome of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Accepted,
    Rejected,
    RejectedNaN,
}

/// Performs one Metropolis step on `state` and adapts the proposal while
/// `state.iterations < settings.burn_in`.
pub fn adaptive_rw_metropolis<F, R>(
    log_target: F,
    state: &mut ChainState,
    settings: &AdaptiveSettings,
    rng: &mut R,
) -> Step
where
    F: FnOnce(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let d = state.dim();
    for (i, p) in state.proposal.iter_mut().enumerate() {
        *p = state.position[i];
    }
    if state.scale > 0.0 {
        for k in 0..d {
            state.scratch[k] = std_normal(rng);
        }
        for i in 0..d {
            let row = &state.factor[i * d..i * d + i + 1];
            let mut s = 0.0;
            for (lij, zj) in row.iter().zip(&state.scratch) {
                s += lij * zj;
            }
            state.proposal[i] += state.scale * s;
        }
    }
    let proposed = log_target(&state.proposal);
    let u: f64 = rng.random();
    let (step, accept_prob) = if proposed.is_nan() {
        state.nan_rejections += 1;
        (Step::RejectedNaN, 0.0)
    } else {
        let log_ratio = proposed - state.log_target;
        let prob = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
        if u < prob {
            (Step::Accepted, prob)
        } else {
            (Step::Rejected, prob)
        }
    };
    if step == Step::Accepted {
        std::mem::swap(&mut state.position, &mut state.proposal);
        state.log_target = proposed;
        state.accepted += 1;
    }
    let it = state.iterations as usize;
    state.iterations += 1;

    if it < settings.burn_in && state.scale > 0.0 {
        let phase_one_end = settings.phase_one_end();
        if it < phase_one_end {
            let gain = 1.0 / ((it + 1) as f64).powf(0.6);
            state.scale *= (gain * (accept_prob - settings.target_acceptance)).exp();
        } else {
            state.welford_push();
            let since = it + 1 - phase_one_end;
            if since % settings.interval.max(1) == 0 || it + 1 == settings.burn_in {
                state.refresh_from_empirical(settings.ridge);
            }
        }
    }
    step
}
