//! Independent oracles for derived quantities: closed-form moments,
//! direct density formulas and simulation from the generative model.

use mvpa_mets::ingest::Participant;
use mvpa_mets::mem::{participant_usual_mvpa, usual_mvpa};
use mvpa_mets::predict::{posterior_predictive_draw, predictive_moments, standardized_residuals, PredictiveDraw, LOG_FACTORS};
use mvpa_mets::rfm::{compute_gamma0, deviance, eval_mean, fourth_root, Gamma, Mat7, MixtureParams, Vec7, R};
use mvpa_mets::simgen::{simulate_cohort, reference_gamma, true_usual_mvpa, MixtureTruth, SimConfig};
use nalgebra::{DMatrix, DVector};
use statskernel::rng::stream_rng;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn taylor_estimate_omits_the_fourth_moment_term() {
    // μ = 1, σ² = 0.25: E(μ+ε)⁴ = 1 + 1.5 + 0.1875.
    let approx = usual_mvpa(f64::INFINITY, 1.0, 0.25);
    assert!((approx - 2.5).abs() < 1e-12);
    assert!((true_usual_mvpa(1.0, 1.0, 0.25) - 2.6875).abs() < 1e-12);
    for &(pi, mu, s2) in &[(0.3, 2.2, 0.4), (0.9, 3.1, 0.05), (0.55, 1.4, 1.3)] {
        let gap = true_usual_mvpa(pi, mu, s2) - usual_mvpa(logit(pi), mu, s2);
        assert!((gap - pi * 3.0 * s2 * s2).abs() < 1e-10 * gap.abs().max(1.0));
    }
}

#[test]
fn simulated_t_minus_estimate_is_the_documented_bias() {
    let cfg = SimConfig {
        n: 400,
        rfm_n: 0,
        ..SimConfig::default()
    };
    let cohort = simulate_cohort(&cfg).unwrap();
    for (p, t) in cohort.participants.iter().zip(&cohort.truth.participants) {
        let est = participant_usual_mvpa(&p.covariates(), t.xi_sq, &cfg.mem, t.b1, t.b2);
        let bias = t.pi * 3.0 * t.xi_sq * t.xi_sq;
        assert!((t.t - est - bias).abs() < 1e-9 * t.t.max(1.0), "{} vs {}", t.t - est, bias);
    }
}

#[test]
fn simulated_lag_one_autocorrelation_matches_phi() {
    let cfg = SimConfig {
        n: 2000,
        rfm_n: 0,
        ..SimConfig::default()
    };
    let cohort = simulate_cohort(&cfg).unwrap();
    let mut cross = [0.0; 2];
    let mut square = [0.0; 2];
    let mut pairs = [0usize; 2];
    let mut count = [0usize; 2];
    for (p, t) in cohort.participants.iter().zip(&cohort.truth.participants) {
        let g = Participant::age_group(p);
        let e: Vec<f64> = t.latent_w.iter().map(|w| (w - t.mu) / t.xi_sq.sqrt()).collect();
        count[g] += e.len();
        for j in 0..e.len() {
            square[g] += e[j] * e[j];
            if j + 1 < e.len() {
                cross[g] += e[j] * e[j + 1];
                pairs[g] += 1;
            }
        }
    }
    for g in 0..2 {
        let r = (cross[g] / pairs[g] as f64) / (square[g] / count[g] as f64);
        let se = 1.0 / (pairs[g] as f64).sqrt();
        assert!((r - cfg.mem.phi[g]).abs() < 4.0 * se + 0.01, "group {g}: {r} vs {}", cfg.mem.phi[g]);
    }
}

#[test]
fn simulated_risk_factor_covariance_matches_mixture_moments() {
    let cfg = SimConfig {
        n: 20_000,
        rfm_n: 20_000,
        ..SimConfig::default()
    };
    let cohort = simulate_cohort(&cfg).unwrap();
    let (y, t) = cohort.rfm_truth();
    let resid: Vec<Vec7> = y
        .iter()
        .zip(&t)
        .map(|(yi, ti)| yi - eval_mean(fourth_root(*ti), &cfg.gamma))
        .collect();
    let n = resid.len() as f64;
    let mean = resid.iter().sum::<Vec7>() / n;
    let cov = resid.iter().map(|r| (r - mean) * (r - mean).transpose()).sum::<Mat7>() / (n - 1.0);
    let (m, s) = cfg.mixture.to_params().unwrap().moments();
    // Relative Frobenius error on the correlation scale.
    let d = Mat7::from_fn(|a, b| 1.0 / (s[(a, a)] * s[(b, b)]).sqrt());
    let rel = (cov - s).component_mul(&d).norm() / s.component_mul(&d).norm();
    assert!(rel < 0.05, "covariance relative error {rel}");
    for j in 0..R {
        assert!((mean[j] - m[j]).abs() < 4.0 * (s[(j, j)] / n).sqrt(), "factor {j}");
    }
}

fn two_component_draw() -> PredictiveDraw {
    PredictiveDraw {
        gamma: reference_gamma(),
        mixture: MixtureTruth::two_component().to_params().unwrap(),
    }
}

#[test]
fn predictive_draws_match_mixture_moments() {
    let draw = two_component_draw();
    let t = 20.0;
    let mut rng = stream_rng(7, 0);
    let n = 100_000;
    let samples: Vec<Vec7> = (0..n)
        .map(|_| {
            let raw = posterior_predictive_draw(t, &draw, &mut rng).unwrap();
            Vec7::from_fn(|j, _| if LOG_FACTORS.contains(&j) { raw[j].ln() } else { raw[j] })
        })
        .collect();
    let mean = samples.iter().sum::<Vec7>() / n as f64;
    let cov = samples.iter().map(|s| (s - mean) * (s - mean).transpose()).sum::<Mat7>() / (n as f64 - 1.0);
    let g0 = compute_gamma0(&draw.mixture.lambda, &draw.mixture.p);
    let expected_mean = g0 + eval_mean(fourth_root(t), &draw.gamma);
    let (_, expected_cov) = draw.mixture.moments();
    for j in 0..R {
        let se = (expected_cov[(j, j)] / n as f64).sqrt();
        assert!((mean[j] - expected_mean[j]).abs() < 4.0 * se, "mean of factor {j}");
    }
    let rel = (cov - expected_cov).norm() / expected_cov.norm();
    assert!(rel < 0.05, "covariance relative error {rel}");
    let (pm, pv) = predictive_moments(fourth_root(t), &draw);
    assert!((pm - expected_mean).amax() < 1e-9);
    for j in 0..R {
        assert!((pv[j] - expected_cov[(j, j)]).abs() < 1e-9 * expected_cov[(j, j)]);
    }
}

#[test]
fn residuals_of_model_data_are_standard() {
    let draw = two_component_draw();
    let mut rng = stream_rng(11, 0);
    let n = 20_000;
    let t: Vec<f64> = (0..n).map(|i| 1.0 + 80.0 * (i as f64 / n as f64)).collect();
    let y: Vec<Vec7> = t
        .iter()
        .map(|ti| {
            let raw = posterior_predictive_draw(*ti, &draw, &mut rng).unwrap();
            Vec7::from_fn(|j, _| if LOG_FACTORS.contains(&j) { raw[j].ln() } else { raw[j] })
        })
        .collect();
    let res = standardized_residuals(&y, &t, &[draw]).unwrap();
    let tbar = t.iter().sum::<f64>() / n as f64;
    let stt: f64 = t.iter().map(|v| (v - tbar).powi(2)).sum();
    for j in 0..R {
        let r: Vec<f64> = res.iter().map(|v| v[j]).collect();
        let m = r.iter().sum::<f64>() / n as f64;
        let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(m.abs() < 3.0 / (n as f64).sqrt(), "factor {j} mean {m}");
        // Var of a sample variance is about (κ − 1)/n; the mixture tails
        // keep κ below 5.
        assert!((v - 1.0).abs() < 3.0 * (4.0 / n as f64).sqrt(), "factor {j} variance {v}");
        let slope = r.iter().zip(&t).map(|(x, ti)| x * (ti - tbar)).sum::<f64>() / stt;
        assert!(slope.abs() < 3.0 / stt.sqrt(), "factor {j} slope {slope}");
    }
}

#[test]
fn single_datum_deviance_is_the_gaussian_formula() {
    let gamma: Gamma = reference_gamma();
    let lambda = Vec7::from_row_slice(&[101.0, 4.7, 4.8, 137.0, 65.0, 129.0, 63.0]);
    let a = Mat7::from_fn(|i, j| ((i * 7 + j) as f64 * 0.37).sin());
    let sigma = a * a.transpose() + Mat7::from_diagonal(&Vec7::from_row_slice(&[9.0, 0.01, 0.04, 16.0, 9.0, 100.0, 16.0]));
    let mix = MixtureParams {
        lambda: vec![lambda],
        sigma: vec![sigma],
        p: vec![1.0],
    };
    let y = Vec7::from_row_slice(&[99.0, 4.6, 4.9, 130.0, 70.0, 120.0, 60.0]);
    let x = 2.0;
    let d = deviance(&[y], &[x], &gamma, &mix).unwrap();

    let s = DMatrix::from_fn(R, R, |i, j| sigma[(i, j)]);
    let r = DVector::from_fn(R, |i, _| y[i] - lambda[i] - eval_mean(x, &gamma)[i]);
    let inv = s.clone().try_inverse().unwrap();
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    let expected = R as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad;
    assert!((d - expected).abs() < 1e-9 * expected.abs(), "{d} vs {expected}");
}
