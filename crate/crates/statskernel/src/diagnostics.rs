//! Convergence diagnostics and Monte Carlo summaries.

use crate::error::{KernelError, Result};

/// Per-parameter split potential scale reduction factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Rhat {
    pub values: Vec<f64>,
}

impl Rhat {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Indices whose R̂ exceeds `threshold` (NaN counts as exceeding).
    pub fn exceeding(&self, threshold: f64) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| !(**v <= threshold))
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with divisor `n - 1`.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Linear-interpolation quantile (type 7), `q` in [0, 1].
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n as f64 - 1.0) * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_chains(chains: &[&[f64]]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(KernelError::Diagnostic(format!(
            "need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(KernelError::Diagnostic("chains have unequal lengths".into()));
    }
    if n < 10 {
        return Err(KernelError::Diagnostic(format!(
            "chains need at least 10 draws, got {n}"
        )));
    }
    Ok(n)
}

fn classic_rhat(chains: &[&[f64]]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = chains.iter().map(|c| variance(c)).sum::<f64>() / chains.len() as f64;
    let between = n * variance(&means);
    if within == 0.0 {
        return if between == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * within + between / n) / within).sqrt()
}

/// Split-R̂ of one scalar parameter: each chain is cut in half (the middle
/// draw dropped when the length is odd) before the between/within comparison.
pub fn split_rhat(chains: &[&[f64]]) -> Result<f64> {
    let n = check_chains(chains)?;
    let half = n / 2;
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        halves.push(&c[..half]);
        halves.push(&c[n - half..]);
    }
    Ok(classic_rhat(&halves))
}

/// Split-R̂ for every parameter. `chains[c][d][k]` is parameter `k` of draw
/// `d` in chain `c`.
pub fn gelman_rubin(chains: &[Vec<Vec<f64>>]) -> Result<Rhat> {
    let n_params = chains
        .first()
        .and_then(|c| c.first())
        .map(|d| d.len())
        .ok_or_else(|| KernelError::Diagnostic("no draws".into()))?;
    let traces = transpose_traces(chains, n_params)?;
    let mut values = Vec::with_capacity(n_params);
    for k in 0..n_params {
        let refs: Vec<&[f64]> = traces.iter().map(|t| t[k].as_slice()).collect();
        values.push(split_rhat(&refs)?);
    }
    Ok(Rhat { values })
}

/// `[chain][draw][param]` to `[chain][param][draw]`.
pub fn transpose_traces(chains: &[Vec<Vec<f64>>], n_params: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    chains
        .iter()
        .map(|chain| {
            let mut out = vec![Vec::with_capacity(chain.len()); n_params];
            for draw in chain {
                if draw.len() != n_params {
                    return Err(KernelError::DimensionMismatch {
                        expected: n_params,
                        got: draw.len(),
                    });
                }
                for (k, v) in draw.iter().enumerate() {
                    out[k].push(*v);
                }
            }
            Ok(out)
        })
        .collect()
}

fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = mean(x);
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn effective_sample_size(chains: &[&[f64]]) -> Result<f64> {
    let n = check_chains(chains)?;
    let m = chains.len();
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| variance(c)).collect();
    let within = mean(&vars);
    let var_plus = (nf - 1.0) / nf * within + variance(&means);
    if !(var_plus > 0.0) {
        return Ok((m * n) as f64);
    }
    let rho = |lag: usize| -> f64 {
        let acov = chains.iter().map(|c| autocovariance(c, lag)).sum::<f64>() / m as f64;
        1.0 - (within - acov) / var_plus
    };
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / (m * n) as f64);
    Ok((m * n) as f64 / tau)
}

/// Monte Carlo standard error of the posterior mean, `sd / sqrt(ESS)`.
pub fn mcse_mean(chains: &[&[f64]]) -> Result<f64> {
    let ess = effective_sample_size(chains)?;
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    Ok((variance(&pooled) / ess).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::std_normal;
    use crate::rng::stream_rng;

    fn iid(seed: u64, n: usize, shift: f64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..n).map(|_| shift + std_normal(&mut rng)).collect()
    }

    #[test]
    fn identical_iid_chains_give_unit_rhat() {
        let c = iid(1, 200_000, 0.0);
        let r = split_rhat(&[&c, &c]).unwrap();
        assert!((r - 1.0).abs() < 1e-3, "{r}");
    }

    #[test]
    fn separated_chains_flagged() {
        let a = iid(2, 1000, 0.0);
        let b = iid(3, 1000, 10.0);
        assert!(split_rhat(&[&a, &b]).unwrap() > 1.5);
    }

    #[test]
    fn iid_chains_converge() {
        let cs: Vec<Vec<f64>> = (0..4).map(|s| iid(10 + s, 1000, 0.0)).collect();
        let refs: Vec<&[f64]> = cs.iter().map(|c| c.as_slice()).collect();
        assert!(split_rhat(&refs).unwrap() < 1.01);
        let ess = effective_sample_size(&refs).unwrap();
        assert!(ess > 2500.0 && ess < 6000.0, "{ess}");
    }

    #[test]
    fn input_validation() {
        let a = iid(4, 20, 0.0);
        let b = iid(5, 19, 0.0);
        assert!(split_rhat(&[&a, &b]).is_err());
        assert!(split_rhat(&[&a]).is_err());
        assert!(split_rhat(&[&a[..5], &b[..5]]).is_err());
    }

    #[test]
    fn ar1_chain_has_reduced_ess() {
        let mut rng = stream_rng(6, 0);
        let mut chains = Vec::new();
        for _ in 0..2 {
            let mut x = 0.0;
            let c: Vec<f64> = (0..20_000)
                .map(|_| {
                    x = 0.9 * x + std_normal(&mut rng);
                    x
                })
                .collect();
            chains.push(c);
        }
        let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        // Integrated autocorrelation time of AR(1) with 0.9 is 19.
        let ess = effective_sample_size(&refs).unwrap();
        assert!(ess > 40_000.0 / 19.0 * 0.7 && ess < 40_000.0 / 19.0 * 1.4, "{ess}");
    }

    #[test]
    fn quantiles() {
        let v = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
    }
}
