//! Convergence diagnostics over several chains of one scalar.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarDiagnostics {
    pub rhat: f64,
    pub ess: f64,
}

/// Split every chain into halves (the middle draw of an odd-length chain
/// is dropped). Returns `None` when fewer than two draws per half remain.
fn split(chains: &[Vec<f64>]) -> Option<Vec<&[f64]>> {
    let n = chains.iter().map(|c| c.len()).min()? / 2;
    if n < 2 {
        return None;
    }
    Some(chains.iter().flat_map(|c| [&c[..n], &c[c.len() - n..]]).collect())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Split-chain potential scale reduction factor.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let Some(parts) = split(chains) else { return f64::NAN };
    let n = parts[0].len() as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let w = mean(&parts.iter().map(|p| var(p)).collect::<Vec<_>>());
    let b = n * var(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Biased autocovariances of `x` for lags `0..x.len()`.
fn autocovariance(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..n).map(|t| c[..n - t].iter().zip(&c[t..]).map(|(a, b)| a * b).sum::<f64>() / n as f64).collect()
}

/// Effective sample size from split chains, truncating the autocorrelation
/// sum with Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let Some(parts) = split(chains) else { return f64::NAN };
    let m = parts.len() as f64;
    let n = parts[0].len();
    let acov: Vec<Vec<f64>> = parts.iter().map(|p| autocovariance(p)).collect();
    let mean_acov = |t: usize| acov.iter().map(|a| a[t]).sum::<f64>() / m;
    let mean_var = mean_acov(0) * n as f64 / (n as f64 - 1.0);
    let chain_means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if parts.len() > 1 {
        var_plus += var(&chain_means);
    }
    let total = m * n as f64;
    if var_plus <= 0.0 {
        return total;
    }
    let rho = |t: usize| 1.0 - (mean_var - mean_acov(t)) / var_plus;

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut t = 1;
    while t + 4 < n && even + odd > 0.0 {
        even = rho(t + 1);
        odd = rho(t + 2);
        if even + odd >= 0.0 {
            rho_hat[t + 1] = even;
            rho_hat[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho_hat[max_t + 1] = even;
    }
    // Force the paired sums to be non-increasing.
    let mut t = 1;
    while t + 4 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let tail = if max_t + 1 < n { rho_hat[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho_hat[..=max_t.min(n - 1)].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    total / tau
}

pub fn diagnose(chains: &[Vec<f64>]) -> ScalarDiagnostics {
    ScalarDiagnostics { rhat: split_rhat(chains), ess: effective_sample_size(chains) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn ar1(phi: f64, n: usize, chains: usize, seed: u64) -> Vec<Vec<f64>> {
        (0..chains)
            .map(|c| {
                let mut rng = stream_rng(seed, c as u64);
                let mut x = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
                (0..n)
                    .map(|_| {
                        x = phi * x + rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn independent_draws() {
        let c = ar1(0.0, 1000, 4, 1);
        let d = diagnose(&c);
        assert!((d.rhat - 1.0).abs() < 0.01);
        assert!((d.ess / 4000.0 - 1.0).abs() < 0.15, "{}", d.ess);
    }

    #[test]
    fn autocorrelated_draws() {
        // Integrated autocorrelation time of AR(1) is (1 + φ) / (1 - φ).
        let phi = 0.9;
        let c = ar1(phi, 5000, 4, 2);
        let expected = 20_000.0 * (1.0 - phi) / (1.0 + phi);
        let ess = effective_sample_size(&c);
        assert!((ess / expected - 1.0).abs() < 0.25, "{ess} vs {expected}");
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let mut c = ar1(0.0, 200, 4, 3);
        for v in &mut c[0] {
            *v += 3.0;
        }
        assert!(split_rhat(&c) > 1.3);
    }

    #[test]
    fn drifting_chain_is_caught_by_splitting() {
        let c: Vec<Vec<f64>> = (0..2).map(|_| (0..200).map(|i| i as f64 / 50.0).collect()).collect();
        assert!(split_rhat(&c) > 1.5);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(split_rhat(&[vec![2.0; 10], vec![2.0; 10]]), 1.0);
        assert!(split_rhat(&[vec![1.0, 2.0]]).is_nan());
        assert_eq!(effective_sample_size(&[vec![2.0; 10]]), 10.0);
    }
}
