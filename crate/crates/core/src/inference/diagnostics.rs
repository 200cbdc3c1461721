//! Rank-normalised split R-hat and bulk effective sample size.

use statrs::distribution::{ContinuousCDF, Normal};

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| {
            // an odd middle draw is dropped
            vec![c[..half].to_vec(), c[n - half..n].to_vec()]
        })
        .collect()
}

/// Replaces every draw by the normal score of its pooled fractional rank.
fn rank_normalise(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // average 1-based rank of the tie block
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &pooled[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)
}

fn rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| sample_variance(c)).collect::<Vec<_>>());
    let b = n * sample_variance(&means);
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Maximum of the bulk and tail rank-normalised split R-hat.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let sp = split(chains);
    if sp.len() < 2 || sp[0].len() < 2 {
        return f64::NAN;
    }
    let bulk = rhat(&rank_normalise(&sp));
    let pooled: Vec<f64> = sp.iter().flatten().copied().collect();
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let folded: Vec<Vec<f64>> = sp.iter().map(|c| c.iter().map(|x| (x - median).abs()).collect()).collect();
    let tail = rhat(&rank_normalise(&folded));
    bulk.max(tail)
}

/// Autocovariances at increasing lags, computed on demand.
struct Autocov {
    centred: Vec<f64>,
}

impl Autocov {
    fn new(x: &[f64]) -> Self {
        let m = mean(x);
        Autocov {
            centred: x.iter().map(|v| v - m).collect(),
        }
    }

    fn at(&self, lag: usize) -> f64 {
        let n = self.centred.len();
        if lag >= n {
            return 0.0;
        }
        self.centred[..n - lag]
            .iter()
            .zip(&self.centred[lag..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64
    }
}

/// Effective sample size with Geyer's initial monotone sequence estimator.
pub(crate) fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let acov: Vec<Autocov> = chains.iter().map(|c| Autocov::new(c)).collect();
    let lag_mean = |t: usize| acov.iter().map(|a| a.at(t)).sum::<f64>() / m as f64;
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = lag_mean(0) * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_variance(&chain_means);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }

    let mut rho = vec![0.0; n + 2];
    let mut rho_even = 1.0;
    rho[0] = rho_even;
    let mut rho_odd = 1.0 - (mean_var - lag_mean(1)) / var_plus;
    rho[1] = rho_odd;
    let mut t = 1;
    while t + 5 < n && rho_even + rho_odd > 0.0 {
        rho_even = 1.0 - (mean_var - lag_mean(t + 1)) / var_plus;
        rho_odd = 1.0 - (mean_var - lag_mean(t + 2)) / var_plus;
        if rho_even + rho_odd >= 0.0 {
            rho[t + 1] = rho_even;
            rho[t + 2] = rho_odd;
        }
        t += 2;
    }
    let max_t = t;
    if rho_even > 0.0 {
        rho[max_t + 1] = rho_even;
    }
    let mut t = 1;
    while t + 3 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1]).max(1.0 / total.log10());
    total / tau
}

/// Bulk effective sample size: ESS of the rank-normalised split chains.
pub fn bulk_ess(chains: &[Vec<f64>]) -> f64 {
    let sp = split(chains);
    if sp.is_empty() || sp[0].len() < 4 {
        return f64::NAN;
    }
    ess(&rank_normalise(&sp))
}
