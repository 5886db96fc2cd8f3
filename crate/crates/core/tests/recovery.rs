//! Recovery studies on simulated data. Each fit is small enough to run in
//! seconds with optimizations on.

use mvpa_mets::mem::{run_mem, traces, MemSettings, MemUnit, P};
use mvpa_mets::preprocess::{fit_preliminary_ar1, Ar1Unit, OptimizerSettings};
use mvpa_mets::rfm::{eval_mean, fourth_root, run_fixed_t, Mat7, RfmPriors, RfmSettings, SweepBlock, Vec7, GAMMA_LEN};
use mvpa_mets::simgen::{simulate_cohort, reference_gamma, SimCohort, SimConfig, REFERENCE_GAMMA0};
use nalgebra::Cholesky;
use statskernel::diagnostics::{gelman_rubin, mcse_mean, quantile};
use statskernel::dist::std_normal;
use statskernel::rng::stream_rng;

fn ar1_units(cohort: &SimCohort) -> Vec<Ar1Unit> {
    cohort
        .mem_units()
        .into_iter()
        .zip(&cohort.participants)
        .filter(|(u, _)| !u.w.is_empty())
        .map(|(u, p)| Ar1Unit {
            z: u.z.to_vec(),
            age: p.age,
            days: u.positive_days,
            w: u.w,
        })
        .collect()
}

fn cohort_with_phi(phi: f64, seed: u64, zero_effects: bool) -> SimCohort {
    let mut cfg = SimConfig {
        n: 500,
        rfm_n: 0,
        seed,
        ..SimConfig::default()
    };
    cfg.mem.phi = [phi, phi];
    if zero_effects {
        cfg.mem.alpha[1..].iter_mut().for_each(|a| *a = 0.0);
        cfg.mem.beta[1..].iter_mut().for_each(|b| *b = 0.0);
    }
    simulate_cohort(&cfg).unwrap()
}

#[test]
fn preliminary_ar1_recovers_phi() {
    let null = fit_preliminary_ar1(&ar1_units(&cohort_with_phi(0.0, 3, true)), &OptimizerSettings::default()).unwrap();
    assert!(null.phi.abs() < 0.1, "phi = {}", null.phi);
    let fit = fit_preliminary_ar1(&ar1_units(&cohort_with_phi(0.4, 4, false)), &OptimizerSettings::default()).unwrap();
    assert!(fit.phi > 0.3 && fit.phi < 0.5, "phi = {}", fit.phi);
}

fn small_mem() -> MemSettings {
    MemSettings {
        chains: 4,
        iterations: 2000,
        burn_in: 1000,
        t_pool: 200,
        ..MemSettings::default()
    }
}

#[test]
fn zero_signal_mem_covers_zero_and_flags_never_active_participant() {
    let cohort = cohort_with_phi(0.3, 5, true);
    let mut units: Vec<MemUnit> = cohort.mem_units();
    let planted = 17;
    units[planted].positive_days.clear();
    units[planted].w.clear();
    let post = run_mem(&units, &small_mem(), 9).unwrap();

    let tr = traces(&post);
    let mut covered = 0;
    for k in (1..P).chain(P + 1..2 * P) {
        let v: Vec<f64> = tr.iter().flat_map(|c| c.iter().map(|d| d[k])).collect();
        if quantile(&v, 0.025) <= 0.0 && 0.0 <= quantile(&v, 0.975) {
            covered += 1;
        }
    }
    // 14 independent-ish 95% intervals; 12 or more cover with probability 0.97.
    assert!(covered >= 12, "only {covered} of 14 slope intervals cover zero");

    let cohort_pi = post.pi_mean.iter().sum::<f64>() / post.pi_mean.len() as f64;
    assert!(post.pi_mean[planted] < cohort_pi, "{} vs {cohort_pi}", post.pi_mean[planted]);
}

#[test]
fn mem_runs_with_different_seeds_agree() {
    let cohort = cohort_with_phi(0.3, 6, false);
    let units = cohort.mem_units();
    let a = run_mem(&units, &small_mem(), 1).unwrap();
    let b = run_mem(&units, &small_mem(), 2).unwrap();
    let both: Vec<Vec<Vec<f64>>> = traces(&a).into_iter().chain(traces(&b)).collect();
    let rhat = gelman_rubin(&both).unwrap();
    assert!(rhat.max() < 1.05, "cross-seed R̂ {:?}", rhat.values);
}

fn mcse(chains: &[Vec<f64>]) -> f64 {
    let refs: Vec<&[f64]> = chains.iter().map(Vec::as_slice).collect();
    mcse_mean(&refs).unwrap()
}

fn rfm_data(n: usize, sigma: &Mat7, seed: u64) -> (Vec<f64>, Vec<Vec7>) {
    let l = Cholesky::new(*sigma).unwrap().l();
    let gamma = reference_gamma();
    let mut rng = stream_rng(seed, 0);
    let t: Vec<f64> = (0..n).map(|i| 80.0 * ((i as f64 + 0.5) / n as f64).powi(2)).collect();
    let y = t
        .iter()
        .map(|ti| {
            let e = Vec7::from_fn(|_, _| std_normal(&mut rng));
            Vec7::from_row_slice(&REFERENCE_GAMMA0) + eval_mean(fourth_root(*ti), &gamma) + l * e
        })
        .collect();
    (t, y)
}

#[test]
fn single_component_covariance_is_recovered() {
    let sigma = Mat7::from_diagonal(&Vec7::from_fn(|j, _| 0.1 * (j + 1) as f64));
    let (t, y) = rfm_data(2000, &sigma, 21);
    let settings = RfmSettings {
        chains: 2,
        iterations: 3000,
        burn_in: 1000,
        thin: 5,
        components: 1,
        ..RfmSettings::default()
    };
    let post = run_fixed_t(&t, &y, &RfmPriors::default(), &settings, 4).unwrap();
    let (_, mix) = post.mean_draw();
    let rel = (mix.sigma[0] - sigma).norm() / sigma.norm();
    assert!(rel < 0.10, "relative Frobenius error {rel}");
}

#[test]
fn sweep_order_leaves_posterior_unchanged() {
    let spread = [15.0f64, 0.22, 0.5, 19.0, 12.0, 35.0, 15.0];
    let sigma = Mat7::from_diagonal(&Vec7::from_fn(|j, _| (0.8 * spread[j]).powi(2)));
    let (t, y) = rfm_data(500, &sigma, 33);
    let base = RfmSettings {
        chains: 3,
        iterations: 12_000,
        burn_in: 2000,
        thin: 5,
        components: 1,
        ..RfmSettings::default()
    };
    let reversed = RfmSettings {
        sweep_order: vec![SweepBlock::Gamma, SweepBlock::Sigma, SweepBlock::Lambda, SweepBlock::P, SweepBlock::Zeta],
        ..base.clone()
    };
    let a = run_fixed_t(&t, &y, &RfmPriors::default(), &base, 5).unwrap();
    let b = run_fixed_t(&t, &y, &RfmPriors::default(), &reversed, 6).unwrap();
    let chain_traces = |post: &mvpa_mets::rfm::RfmPosterior, k: usize| -> Vec<Vec<f64>> {
        post.draws
            .chunks(post.draws_per_chain)
            .map(|c| c.iter().map(|d| d.gamma.to_array()[k]).collect())
            .collect()
    };
    for k in 0..GAMMA_LEN {
        let ta = chain_traces(&a, k);
        let tb = chain_traces(&b, k);
        let mean = |t: &Vec<Vec<f64>>| t.iter().flatten().sum::<f64>() / t.iter().map(Vec::len).sum::<usize>() as f64;
        let se = (mcse(&ta).powi(2) + mcse(&tb).powi(2)).sqrt();
        let diff = (mean(&ta) - mean(&tb)).abs();
        assert!(diff < 4.0 * se, "γ[{k}]: |Δ| = {diff}, se = {se}");
    }
}
