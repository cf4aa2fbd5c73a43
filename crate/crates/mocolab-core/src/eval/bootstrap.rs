//! Bootstrap confidence intervals over test-set resamples.
//!
//! The interval is `mu +- 1.96*sigma/sqrt(N)` with `mu` and `sigma` the mean
//! and standard deviation of the metric over N resamples — the formula
//! implemented verbatim; a conventional percentile interval is available as
//! an alternative method.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use crate::tensor::kernels::map_indexed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CiMethod {
    /// `mu +- 1.96*sigma/sqrt(N)`.
    #[default]
    #[serde(rename = "normal_over_sqrt_n")]
    NormalOverSqrtN,
    /// 2.5 / 97.5 percentiles of the replicate values.
    #[serde(rename = "percentile")]
    Percentile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// Metric on the full (unresampled) set.
    pub point: f64,
    pub mu: f64,
    pub sigma: f64,
    /// Number of replicates that produced a value.
    pub n: usize,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Replicates skipped because the metric was undefined on them.
    pub skipped: usize,
    /// Per-replicate metric values (not serialized into report JSON).
    #[serde(skip)]
    pub values: Vec<f64>,
}

/// Metric over `n_replicates` with-replacement resamples of the test set,
/// each replicate drawn from its own seeded stream so evaluation order is
/// irrelevant. Replicates on which the metric is undefined are skipped and
/// counted; more than 10% skips is an error.
pub fn bootstrap_ci<F>(
    metric: F,
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    n_replicates: usize,
    seed: u64,
    method: CiMethod,
) -> Result<BootstrapResult>
where
    F: Fn(&[Vec<f64>], &[Vec<u8>]) -> Result<f64> + Sync + Send,
{
    if n_replicates < 2 {
        return Err(Error::Config(format!(
            "bootstrap needs at least 2 replicates, got {n_replicates}"
        )));
    }
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::dimension(
            "bootstrap_ci",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let point = metric(scores, labels)?;
    let size = scores.len();
    let values: Vec<Option<f64>> = map_indexed(n_replicates, |rep| {
        let mut rng = derive_rng(seed, &[stream::BOOTSTRAP, rep as u64]);
        let mut s = Vec::with_capacity(size);
        let mut l = Vec::with_capacity(size);
        for _ in 0..size {
            let idx = rng.gen_range(0..size);
            s.push(scores[idx].clone());
            l.push(labels[idx].clone());
        }
        metric(&s, &l).ok()
    });
    let kept: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    let skipped = n_replicates - kept.len();
    if skipped * 10 > n_replicates {
        return Err(Error::numeric(
            "bootstrap_ci",
            format!("{skipped} of {n_replicates} replicates had an undefined metric"),
        ));
    }
    if kept.len() < 2 {
        return Err(Error::numeric("bootstrap_ci", "fewer than 2 usable replicates"));
    }
    let n = kept.len();
    let mu = kept.iter().sum::<f64>() / n as f64;
    let var = kept.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n as f64 - 1.0);
    let sigma = var.sqrt();
    let (ci_low, ci_high) = match method {
        CiMethod::NormalOverSqrtN => {
            let half = 1.96 * sigma / (n as f64).sqrt();
            (mu - half, mu + half)
        }
        CiMethod::Percentile => {
            let mut sorted = kept.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
            (percentile(&sorted, 0.025), percentile(&sorted, 0.975))
        }
    };
    Ok(BootstrapResult {
        point,
        mu,
        sigma,
        n,
        ci_low,
        ci_high,
        skipped,
        values: kept,
    })
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}
