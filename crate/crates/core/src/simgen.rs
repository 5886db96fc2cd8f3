//! Synthetic cohorts from the two-part MEM and the mixture SUR with known
//! parameters. Simulation starts at the day level; minute counts are not
//! generated.

use nalgebra::Cholesky;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statskernel::density::inv_logit;
use statskernel::dist::std_normal;
use statskernel::rng::{stream_id, stream_rng, KernelRng};

use crate::error::{Error, Result};
use crate::ingest::{DayActivity, PanelRow, Participant, Race, Sex, DAYS_OBSERVED};
use crate::mem::{MemParams, MemUnit};
use crate::rfm::{eval_mean, fourth_root, CurveParams, Gamma, Mat7, MixtureParams, Vec7, R};

const STREAM_SIM: u64 = 0x5349_4D00;
const DAYS: usize = DAYS_OBSERVED as usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSettings {
    /// Inclusive age bands in years with relative frequencies.
    pub age_bands: Vec<(u32, u32, f64)>,
    pub female_fraction: f64,
    pub bmi_mean: [f64; 2],
    pub bmi_sd: [f64; 2],
    pub bmi_min: f64,
    /// Relative frequencies in `Race::ALL` order.
    pub race_weights: [f64; 5],
    /// Relative frequencies of education codes 1..=6.
    pub education_weights: [f64; 6],
}

impl Default for CovariateSettings {
    fn default() -> Self {
        // Marginals of the 2508-participant accelerometry sample.
        Self {
            age_bands: vec![(18, 34, 401.0), (35, 49, 544.0), (50, 65, 699.0), (66, 85, 864.0)],
            female_fraction: 1243.0 / 2508.0,
            bmi_mean: [27.5, 28.0],
            bmi_sd: [4.7, 6.2],
            bmi_min: 15.0,
            race_weights: [445.0, 47.0, 1515.0, 391.0, 110.0],
            education_weights: [330.0, 263.0, 616.0, 683.0, 614.0, 2.0],
        }
    }
}

/// Error mixture truth: component intercepts, standard deviations and a
/// shared correlation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureTruth {
    pub p: Vec<f64>,
    pub lambda: Vec<[f64; R]>,
    pub sd: Vec<[f64; R]>,
    pub correlation: [[f64; R]; R],
}

pub const REFERENCE_GAMMA0: [f64; R] = [101.09, 4.71, 4.77, 137.17, 64.81, 128.81, 62.87];

/// Posterior means of the curve and slope parameters reported for the
/// NHANES fit.
pub fn reference_gamma() -> Gamma {
    Gamma {
        curves: [
            CurveParams { l: 11.36, k: 1.64, b: 2.31 },
            CurveParams { l: 0.14, k: 2.56, b: 1.27 },
            CurveParams { l: 0.25, k: 3.68, b: 2.54 },
            CurveParams { l: 19.22, k: 3.02, b: 1.44 },
        ],
        slopes: [2.63, -5.91, -3.32],
    }
}

/// Marginal spreads on the model scale (cm, log mg/dL, mm Hg, mg/dL).
pub const REFERENCE_SPREAD: [f64; R] = [15.0, 0.22, 0.5, 19.0, 12.0, 35.0, 15.0];

pub const DEFAULT_CORRELATION: [[f64; R]; R] = [
    [1.00, 0.30, 0.30, 0.20, 0.15, 0.05, -0.35],
    [0.30, 1.00, 0.25, 0.15, 0.05, 0.00, -0.15],
    [0.30, 0.25, 1.00, 0.15, 0.15, 0.20, -0.40],
    [0.20, 0.15, 0.15, 1.00, 0.50, 0.05, 0.00],
    [0.15, 0.05, 0.15, 0.50, 1.00, 0.10, 0.00],
    [0.05, 0.00, 0.20, 0.05, 0.10, 1.00, 0.00],
    [-0.35, -0.15, -0.40, 0.00, 0.00, 0.00, 1.00],
];

impl MixtureTruth {
    /// Two components with weights (0.65, 0.35) whose weighted mean is
    /// `REFERENCE_GAMMA0`; the minor component sits higher on every factor but
    /// HDL.
    pub fn two_component() -> Self {
        let p = vec![0.65, 0.35];
        let sep: Vec<f64> = REFERENCE_SPREAD
            .iter()
            .enumerate()
            .map(|(j, s)| if j == 6 { -1.6 * s } else { 1.6 * s })
            .collect();
        let l1: [f64; R] = std::array::from_fn(|j| REFERENCE_GAMMA0[j] - p[1] * sep[j]);
        let l2: [f64; R] = std::array::from_fn(|j| REFERENCE_GAMMA0[j] + p[0] * sep[j]);
        Self {
            p,
            lambda: vec![l1, l2],
            sd: vec![
                std::array::from_fn(|j| 0.60 * REFERENCE_SPREAD[j]),
                std::array::from_fn(|j| 0.68 * REFERENCE_SPREAD[j]),
            ],
            correlation: DEFAULT_CORRELATION,
        }
    }

    pub fn single_component() -> Self {
        Self {
            p: vec![1.0],
            lambda: vec![REFERENCE_GAMMA0],
            sd: vec![std::array::from_fn(|j| 0.82 * REFERENCE_SPREAD[j])],
            correlation: DEFAULT_CORRELATION,
        }
    }

    pub fn to_params(&self) -> Result<MixtureParams> {
        let corr = Mat7::from_fn(|a, b| self.correlation[a][b]);
        let mix = MixtureParams {
            lambda: self.lambda.iter().map(|l| Vec7::from_row_slice(l)).collect(),
            sigma: self
                .sd
                .iter()
                .map(|s| {
                    let d = Vec7::from_row_slice(s);
                    Mat7::from_fn(|a, b| d[a] * d[b] * corr[(a, b)])
                })
                .collect(),
            p: self.p.clone(),
        };
        mix.validate()?;
        Ok(mix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    /// Participants with a risk factor panel, taken as the first `rfm_n`.
    pub rfm_n: usize,
    pub seed: u64,
    pub covariates: CovariateSettings,
    pub mem: MemParams,
    /// Cubic in age (years) for the within-person variance on the
    /// fourth-root scale.
    pub delta: [f64; 4],
    pub gamma: Gamma,
    pub mixture: MixtureTruth,
    pub wear_minutes: u16,
    /// Standard deviation of log survey weights; 0 gives equal weights.
    pub survey_weight_log_sd: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 2508,
            rfm_n: 1039,
            seed: 20_260_101,
            covariates: CovariateSettings::default(),
            mem: default_mem_truth(),
            delta: [0.10, 0.0100, -0.00020, 1.2e-6],
            gamma: reference_gamma(),
            mixture: MixtureTruth::two_component(),
            wear_minutes: 900,
            survey_weight_log_sd: 0.0,
        }
    }
}

pub fn default_mem_truth() -> MemParams {
    MemParams {
        alpha: [2.0, -1.0, -0.3, -0.2, 0.1, 0.0, -0.2, 0.0],
        beta: [2.8, -0.5, -0.15, -0.1, 0.05, 0.0, -0.1, 0.0],
        phi: [0.3, 0.5],
        sigma_b: [0.8, 0.35],
        rho: 0.4,
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("simulation: {m}")));
        if self.n == 0 || self.rfm_n > self.n {
            return bad("need 0 < n and rfm_n ≤ n");
        }
        let m = &self.mem;
        if m.phi.iter().any(|p| !(p.abs() < 1.0)) {
            return bad("|φ| must be below 1");
        }
        if m.sigma_b.iter().any(|s| !(*s > 0.0)) || !(m.rho.abs() < 1.0) {
            return bad("random-effect scales must be positive and |ρ| < 1");
        }
        let c = &self.covariates;
        if c.age_bands.is_empty() || c.age_bands.iter().any(|(lo, hi, w)| lo > hi || *lo < 18 || !(*w > 0.0)) {
            return bad("age bands must be nonempty, start at 18 or later and carry positive weight");
        }
        if !(0.0..=1.0).contains(&c.female_fraction) || c.bmi_sd.iter().any(|s| !(*s > 0.0)) {
            return bad("covariate settings out of range");
        }
        for (lo, hi, _) in &c.age_bands {
            for age in *lo..=*hi {
                let a = f64::from(age);
                let d = &self.delta;
                if d[0] + a * (d[1] + a * (d[2] + a * d[3])) < 0.0 {
                    return bad("variance cubic is negative inside the age range");
                }
            }
        }
        if self.gamma.curves.iter().any(|c| !(c.k > 0.0)) {
            return bad("curve rates K must be positive");
        }
        self.mixture.to_params().map_err(|e| Error::Config(format!("simulation mixture: {e}")))?;
        if !(self.survey_weight_log_sd >= 0.0) || self.wear_minutes < 600 {
            return bad("survey weight spread must be nonnegative and wear time full-day");
        }
        Ok(())
    }

    /// Unfloored variance cubic.
    pub fn xi_sq(&self, age: f64) -> f64 {
        let d = &self.delta;
        (d[0] + age * (d[1] + age * (d[2] + age * d[3]))).max(0.0)
    }
}

/// `π · E[(μ + ε)⁴]` for `ε ~ N(0, ξ²)`, i.e. `π (μ⁴ + 6μ²ξ² + 3ξ⁴)`.
pub fn true_usual_mvpa(pi: f64, mu: f64, xi_sq: f64) -> f64 {
    let m2 = mu * mu;
    pi * (m2 * m2 + 6.0 * m2 * xi_sq + 3.0 * xi_sq * xi_sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub participant_id: String,
    pub b1: f64,
    pub b2: f64,
    pub pi: f64,
    pub mu: f64,
    pub xi_sq: f64,
    pub t: f64,
    /// Fourth-root amounts for all seven days before participation is applied.
    pub latent_w: Vec<f64>,
    pub zeta: Option<usize>,
    /// Model-scale risk factors.
    pub y: Option<[f64; R]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub config: SimConfig,
    pub participants: Vec<ParticipantTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCohort {
    pub participants: Vec<Participant>,
    pub days: Vec<DayActivity>,
    pub panels: Vec<PanelRow>,
    pub truth: Truth,
}

impl SimCohort {
    /// MEM input built straight from the simulated fourth-root amounts with
    /// the true variance function, bypassing weekend adjustment.
    pub fn mem_units(&self) -> Vec<MemUnit> {
        let cfg = &self.truth.config;
        let mut by_id: std::collections::HashMap<&str, Vec<&DayActivity>> = std::collections::HashMap::new();
        for d in &self.days {
            by_id.entry(d.participant_id.as_str()).or_default().push(d);
        }
        self.participants
            .iter()
            .map(|p| {
                let mut days = by_id.remove(p.participant_id.as_str()).unwrap_or_default();
                days.sort_by_key(|d| d.day_index);
                let (positive_days, w): (Vec<u8>, Vec<f64>) = days
                    .iter()
                    .filter(|d| d.mvpa_minutes > 0.0)
                    .map(|d| (d.day_index, d.mvpa_minutes.powf(0.25)))
                    .unzip();
                MemUnit {
                    participant_id: p.participant_id.clone(),
                    z: p.covariates(),
                    group: p.age_group(),
                    xi_sq: cfg.xi_sq(p.age).max(crate::preprocess::DEFAULT_VARIANCE_FLOOR),
                    observed_days: days.len() as u8,
                    positive_days,
                    w,
                }
            })
            .collect()
    }

    /// Model-scale risk factors and true `t` of the panel participants.
    pub fn rfm_truth(&self) -> (Vec<Vec7>, Vec<f64>) {
        self.truth
            .participants
            .iter()
            .filter_map(|p| p.y.map(|y| (Vec7::from_row_slice(&y), p.t)))
            .unzip()
    }
}

fn weighted_index(weights: &[f64], rng: &mut KernelRng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

pub fn participant_id(i: usize) -> String {
    format!("P{:05}", i + 1)
}

struct Simulated {
    participant: Participant,
    days: Vec<DayActivity>,
    panel: Option<PanelRow>,
    truth: ParticipantTruth,
}

/// Draws a cohort; each participant uses its own substream so results do
/// not depend on scheduling.
pub fn simulate_cohort(cfg: &SimConfig) -> Result<SimCohort> {
    cfg.validate()?;
    let mix = cfg.mixture.to_params()?;
    let factors: Vec<Mat7> = mix
        .sigma
        .iter()
        .map(|s| Cholesky::new(*s).map(|c| c.l()).expect("validated covariance"))
        .collect();
    let sims: Vec<Simulated> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, stream_id(&[STREAM_SIM, i as u64]));
            simulate_one(cfg, &mix, &factors, i, &mut rng)
        })
        .collect();
    let mut cohort = SimCohort {
        participants: Vec::with_capacity(cfg.n),
        days: Vec::with_capacity(cfg.n * DAYS),
        panels: Vec::with_capacity(cfg.rfm_n),
        truth: Truth {
            config: cfg.clone(),
            participants: Vec::with_capacity(cfg.n),
        },
    };
    for s in sims {
        cohort.participants.push(s.participant);
        cohort.days.extend(s.days);
        cohort.panels.extend(s.panel);
        cohort.truth.participants.push(s.truth);
    }
    Ok(cohort)
}

fn simulate_one(cfg: &SimConfig, mix: &MixtureParams, factors: &[Mat7], i: usize, rng: &mut KernelRng) -> Simulated {
    let c = &cfg.covariates;
    let id = participant_id(i);
    let band = &c.age_bands[weighted_index(&c.age_bands.iter().map(|b| b.2).collect::<Vec<_>>(), rng)];
    let age = f64::from(rng.random_range(band.0..=band.1));
    let female = rng.random::<f64>() < c.female_fraction;
    let s = usize::from(female);
    let bmi_dist = Normal::new(c.bmi_mean[s], c.bmi_sd[s]).expect("validated BMI spread");
    let bmi = loop {
        let b = bmi_dist.sample(rng);
        if b >= c.bmi_min {
            break b;
        }
    };
    let participant = Participant {
        participant_id: id.clone(),
        age,
        sex: if female { Sex::Female } else { Sex::Male },
        race: Race::ALL[weighted_index(&c.race_weights, rng)],
        education: weighted_index(&c.education_weights, rng) as u8 + 1,
        bmi,
    };
    let z = participant.covariates();
    let m = &cfg.mem;
    let (s1, s2) = (m.sigma_b[0], m.sigma_b[1]);
    let e1 = std_normal(rng);
    let e2 = std_normal(rng);
    let b1 = s1 * e1;
    let b2 = s2 * (m.rho * e1 + (1.0 - m.rho * m.rho).sqrt() * e2);
    let dot = |c: &[f64; 8]| z.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
    let pi = inv_logit(dot(&m.alpha) + b1);
    let mu = dot(&m.beta) + b2;
    let xi_sq = cfg.xi_sq(age);
    let phi = m.phi[participant.age_group()];
    let positive: Vec<bool> = (0..DAYS).map(|_| rng.random::<f64>() < pi).collect();
    // Stationary AR(1) errors, redrawn until every participating day is
    // positive on the fourth-root scale.
    let xi = xi_sq.sqrt();
    let mut latent = vec![0.0; DAYS];
    for attempt in 0.. {
        let mut e = xi * std_normal(rng);
        for (j, w) in latent.iter_mut().enumerate() {
            if j > 0 {
                e = phi * e + (1.0 - phi * phi).sqrt() * xi * std_normal(rng);
            }
            *w = mu + e;
        }
        if positive.iter().zip(&latent).all(|(p, w)| !p || *w > 0.0) {
            break;
        }
        if attempt == 1000 {
            latent.iter_mut().for_each(|w| *w = w.max(1e-3));
            break;
        }
    }
    let start = rng.random_range(1..=7u8);
    let wear = cfg.wear_minutes;
    let days = (0..DAYS)
        .map(|j| {
            let minutes = if positive[j] { latent[j].powi(4).min(f64::from(wear)) } else { 0.0 };
            DayActivity {
                participant_id: id.clone(),
                day_index: j as u8 + 1,
                day_of_week: ((usize::from(start) - 1 + j) % 7) as u8 + 1,
                wear_minutes: wear,
                mvpa_minutes: minutes,
                is_full_day: true,
            }
        })
        .collect();
    let t = true_usual_mvpa(pi, mu, xi_sq);
    let (panel, zeta, y) = if i < cfg.rfm_n {
        let h = weighted_index(&mix.p, rng);
        let mean = mix.lambda[h] + eval_mean(fourth_root(t), &cfg.gamma);
        let y = loop {
            let e = Vec7::from_fn(|_, _| std_normal(rng));
            let y = mean + factors[h] * e;
            if [0, 3, 4, 5, 6].iter().all(|&j| y[j] > 0.0) {
                break y;
            }
        };
        let weight = if cfg.survey_weight_log_sd > 0.0 {
            (cfg.survey_weight_log_sd * std_normal(rng)).exp()
        } else {
            1.0
        };
        let panel = PanelRow {
            participant_id: id.clone(),
            waist_cm: Some(y[0]),
            glucose_mgdl: Some(y[1].exp()),
            triglycerides_mgdl: Some(y[2].exp()),
            sbp_mmhg: Some(y[3]),
            dbp_mmhg: Some(y[4]),
            ldl_mgdl: Some(y[5]),
            hdl_mgdl: Some(y[6]),
            survey_weight: Some(weight),
        };
        (Some(panel), Some(h), Some(std::array::from_fn(|j| y[j])))
    } else {
        (None, None, None)
    };
    Simulated {
        participant,
        days,
        panel,
        truth: ParticipantTruth {
            participant_id: id,
            b1,
            b2,
            pi,
            mu,
            xi_sq,
            t,
            latent_w: latent,
            zeta,
            y,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small(n: usize) -> SimConfig {
        SimConfig {
            n,
            rfm_n: n / 2,
            ..SimConfig::default()
        }
    }

    #[test]
    fn usual_mvpa_moment_examples() {
        assert_eq!(true_usual_mvpa(1.0, 1.0, 0.25), 2.6875);
        assert_eq!(true_usual_mvpa(0.4, 2.0, 0.0), 0.4 * 16.0);
        assert_eq!(true_usual_mvpa(0.0, 3.0, 0.5), 0.0);
    }

    #[test]
    fn degenerate_noise_gives_constant_amounts() {
        let mut cfg = small(40);
        cfg.delta = [0.0; 4];
        cfg.mem.phi = [0.0, 0.0];
        let c = simulate_cohort(&cfg).unwrap();
        for (p, t) in c.participants.iter().zip(&c.truth.participants) {
            for d in c.days.iter().filter(|d| d.participant_id == p.participant_id && d.mvpa_minutes > 0.0) {
                assert_relative_eq!(d.mvpa_minutes.powf(0.25), t.mu, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn certain_participation_has_no_zero_days() {
        let mut cfg = small(60);
        cfg.mem.alpha = [40.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let c = simulate_cohort(&cfg).unwrap();
        assert!(c.days.iter().all(|d| d.mvpa_minutes > 0.0));
    }

    #[test]
    fn deterministic_and_complete() {
        let cfg = small(50);
        let a = simulate_cohort(&cfg).unwrap();
        let b = simulate_cohort(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.days.len(), 50 * 7);
        assert_eq!(a.panels.len(), 25);
        assert!(a.panels.iter().all(|p| p.complete().is_some()));
        assert!(a.days.iter().all(|d| d.mvpa_minutes <= f64::from(d.wear_minutes)));
        let units = a.mem_units();
        assert_eq!(units.len(), 50);
    }

    #[test]
    fn default_truth_is_valid_and_centered() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        let mix = cfg.mixture.to_params().unwrap();
        let g0 = crate::rfm::compute_gamma0(&mix.lambda, &mix.p);
        for j in 0..R {
            assert_relative_eq!(g0[j], REFERENCE_GAMMA0[j], max_relative = 1e-12);
        }
        MixtureTruth::single_component().to_params().unwrap();
    }
}
