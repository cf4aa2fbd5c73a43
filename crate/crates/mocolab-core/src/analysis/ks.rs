//! Kolmogorov-Smirnov distance between two logit samples, computed over a
//! shared equal-width binning of their union range: normalized bin counts
//! act as discrete pdfs, and the statistic is the maximum CDF gap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KsConfig {
    pub num_bins: usize,
}

impl Default for KsConfig {
    fn default() -> Self {
        KsConfig { num_bins: 40 }
    }
}

impl KsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::Config(format!(
                "num_bins must be >= 2, got {}",
                self.num_bins
            )));
        }
        Ok(())
    }
}

/// Max over bins of |CDF_a - CDF_b|; 0 when every value across both samples
/// is identical (single-bin degenerate case).
pub fn ks_distance(logits_a: &[f64], logits_b: &[f64], cfg: &KsConfig) -> Result<f64> {
    cfg.validate()?;
    if logits_a.is_empty() || logits_b.is_empty() {
        return Err(Error::dimension("ks_distance", "both samples must be nonempty"));
    }
    for (side, vals) in [("a", logits_a), ("b", logits_b)] {
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "ks_distance",
                format!("sample {side} contains a non-finite value"),
            ));
        }
    }
    let min = logits_a
        .iter()
        .chain(logits_b)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = logits_a
        .iter()
        .chain(logits_b)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(0.0);
    }
    let hist = |vals: &[f64]| -> Vec<usize> {
        let mut counts = vec![0usize; cfg.num_bins];
        let width = (max - min) / cfg.num_bins as f64;
        for &v in vals {
            let bin = (((v - min) / width) as usize).min(cfg.num_bins - 1);
            counts[bin] += 1;
        }
        counts
    };
    let ca = hist(logits_a);
    let cb = hist(logits_b);
    // CDFs from integer cumulative counts, so complete separation is
    // exactly 1.0
    let (na, nb) = (logits_a.len() as f64, logits_b.len() as f64);
    let mut cum_a = 0usize;
    let mut cum_b = 0usize;
    let mut ks = 0.0f64;
    for (a, b) in ca.into_iter().zip(cb) {
        cum_a += a;
        cum_b += b;
        ks = ks.max((cum_a as f64 / na - cum_b as f64 / nb).abs());
    }
    Ok(ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Independent binning + CDF oracle.
    fn ks_oracle(a: &[f64], b: &[f64], bins: usize) -> f64 {
        let all: Vec<f64> = a.iter().chain(b).cloned().collect();
        let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            return 0.0;
        }
        let mut ca = vec![0usize; bins];
        let mut cb = vec![0usize; bins];
        let place = |v: f64| -> usize {
            let raw = ((v - min) / (max - min) * bins as f64) as usize;
            raw.min(bins - 1)
        };
        for &v in a {
            ca[place(v)] += 1;
        }
        for &v in b {
            cb[place(v)] += 1;
        }
        let mut best = 0.0f64;
        let mut run_a = 0usize;
        let mut run_b = 0usize;
        for i in 0..bins {
            run_a += ca[i];
            run_b += cb[i];
            best = best
                .max((run_a as f64 / a.len() as f64 - run_b as f64 / b.len() as f64).abs());
        }
        best
    }

    #[test]
    fn identical_samples_give_zero() {
        let a = [0.3, -1.0, 2.0, 0.7];
        assert_eq!(ks_distance(&a, &a, &KsConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_supports_give_one() {
        let a: Vec<f64> = (0..50).map(|i| i as f64 / 50.0).collect();
        let b: Vec<f64> = (0..50).map(|i| 9.0 + i as f64 / 50.0).collect();
        assert_eq!(ks_distance(&a, &b, &KsConfig::default()).unwrap(), 1.0);
    }

    #[test]
    fn all_identical_values_degenerate_to_zero() {
        let a = [1.5; 4];
        let b = [1.5; 7];
        assert_eq!(ks_distance(&a, &b, &KsConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn spec_overlap_example_matches_oracle() {
        let a = [0.0, 1.0, 2.0, 3.0];
        let b = [2.0, 3.0, 4.0, 5.0];
        let got = ks_distance(&a, &b, &KsConfig::default()).unwrap();
        let want = ks_oracle(&a, &b, 40);
        assert_eq!(got, want);
        // two of four values below the union midpoint differ -> 0.5
        assert!((got - 0.5).abs() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_pairs() {
        let mut rng = crate::rng::derive_rng(71, &[5]);
        for _ in 0..100 {
            let na = rng.gen_range(2..40);
            let nb = rng.gen_range(2..40);
            let a: Vec<f64> = (0..na).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..nb).map(|_| rng.gen_range(-2.0..5.0)).collect();
            let got = ks_distance(&a, &b, &KsConfig::default()).unwrap();
            let want = ks_oracle(&a, &b, 40);
            assert_eq!(got, want);
            assert!((0.0..=1.0).contains(&got));
            let sym = ks_distance(&b, &a, &KsConfig::default()).unwrap();
            assert_eq!(got, sym);
        }
    }

    #[test]
    fn within_bin_perturbation_is_invisible() {
        // values interior to their bins; a sub-boundary nudge is invisible
        let a: Vec<f64> = (0..20).map(|i| i as f64 + 0.5).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 1e-9).collect();
        let d = ks_distance(&a, &b, &KsConfig::default()).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn config_and_input_validation() {
        assert!(ks_distance(&[], &[1.0], &KsConfig::default()).is_err());
        assert!(ks_distance(&[1.0], &[2.0], &KsConfig { num_bins: 1 }).is_err());
        assert!(ks_distance(&[f64::NAN], &[1.0], &KsConfig::default()).is_err());
    }
}
