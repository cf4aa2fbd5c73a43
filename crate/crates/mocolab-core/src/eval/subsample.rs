//! Stratified label-fraction subsampling.
//!
//! Multi-label stratification is greedy by rarest label first (exact
//! multi-label stratification is NP-hard); for single-label binary data the
//! per-label positive counts land within 1 of `round(fraction * positives)`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_rng, stream};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelFractionSpec {
    pub fraction: f64,
    pub seed: u64,
}

impl LabelFractionSpec {
    pub fn new(fraction: f64, seed: u64) -> Self {
        LabelFractionSpec { fraction, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction must be in (0, 1], got {}",
                self.fraction
            )));
        }
        Ok(())
    }
}

/// Deterministic per seed. Returns ascending indices into `labels`.
pub fn stratified_subsample_indices(
    labels: &[Vec<u8>],
    spec: &LabelFractionSpec,
) -> Result<Vec<usize>> {
    spec.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("cannot subsample an empty dataset".into()));
    }
    if spec.fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let target_total = (spec.fraction * n as f64).round() as usize;
    if target_total < 2 {
        return Err(Error::Config(format!(
            "fraction {} of {} samples yields fewer than 2 rows",
            spec.fraction, n
        )));
    }
    let num_labels = labels[0].len();
    let mut prevalence: Vec<(usize, usize)> = (0..num_labels)
        .map(|l| (labels.iter().filter(|r| r[l] == 1).count(), l))
        .collect();
    prevalence.sort(); // ascending count, then label index

    let targets: Vec<usize> = (0..num_labels)
        .map(|l| {
            let positives = labels.iter().filter(|r| r[l] == 1).count();
            (spec.fraction * positives as f64).round() as usize
        })
        .collect();
    let mut counts = vec![0usize; num_labels];
    let mut rng = derive_rng(spec.seed, &[stream::SUBSAMPLE]);
    let mut selected: BTreeSet<usize> = BTreeSet::new();
    for &(_, label) in &prevalence {
        if counts[label] >= targets[label] {
            continue;
        }
        // prefer candidates that do not overshoot labels whose target is
        // already met
        let mut safe: Vec<usize> = Vec::new();
        let mut risky: Vec<usize> = Vec::new();
        for i in 0..n {
            if selected.contains(&i) || labels[i][label] != 1 {
                continue;
            }
            let overshoots = labels[i]
                .iter()
                .enumerate()
                .any(|(m, &v)| m != label && v == 1 && counts[m] >= targets[m]);
            if overshoots {
                risky.push(i);
            } else {
                safe.push(i);
            }
        }
        safe.shuffle(&mut rng);
        risky.shuffle(&mut rng);
        for idx in safe.into_iter().chain(risky) {
            if counts[label] >= targets[label] {
                break;
            }
            selected.insert(idx);
            for (m, &v) in labels[idx].iter().enumerate() {
                counts[m] += v as usize;
            }
        }
    }
    if selected.len() < target_total {
        // fill with all-negative rows first so per-label targets stay put
        let mut negatives: Vec<usize> = (0..n)
            .filter(|i| !selected.contains(i) && labels[*i].iter().all(|&v| v == 0))
            .collect();
        negatives.shuffle(&mut rng);
        for idx in negatives {
            if selected.len() == target_total {
                break;
            }
            selected.insert(idx);
        }
        let mut rest: Vec<usize> = (0..n).filter(|i| !selected.contains(i)).collect();
        rest.shuffle(&mut rng);
        for idx in rest {
            if selected.len() == target_total {
                break;
            }
            selected.insert(idx);
        }
    }
    Ok(selected.into_iter().collect())
}

pub fn stratified_subsample<T: Scalar>(
    dataset: &Dataset<T>,
    spec: &LabelFractionSpec,
) -> Result<Dataset<T>> {
    let indices = stratified_subsample_indices(&dataset.labels, spec)?;
    Ok(dataset.subset(&indices))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_labels(n: usize, positive_rate: f64, seed: u64) -> Vec<Vec<u8>> {
        // deterministic arrangement with an exact positive count
        let pos = (n as f64 * positive_rate).round() as usize;
        let mut labels: Vec<Vec<u8>> = (0..n).map(|i| vec![u8::from(i < pos)]).collect();
        let mut rng = derive_rng(seed, &[0x99]);
        labels.shuffle(&mut rng);
        labels
    }

    #[test]
    fn fraction_one_is_identity() {
        let labels = binary_labels(50, 0.3, 1);
        let idx = stratified_subsample_indices(&labels, &LabelFractionSpec::new(1.0, 0)).unwrap();
        assert_eq!(idx, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn thirty_percent_positive_at_six_percent() {
        // 1000 samples, 30% positive, fraction 0.06 -> 60 rows, 18 positive
        let labels = binary_labels(1000, 0.3, 2);
        let idx =
            stratified_subsample_indices(&labels, &LabelFractionSpec::new(0.06, 3)).unwrap();
        assert_eq!(idx.len(), 60);
        let pos: usize = idx.iter().map(|&i| labels[i][0] as usize).sum();
        assert_eq!(pos, 18);
    }

    #[test]
    fn positive_count_deviation_at_most_one() {
        let labels = binary_labels(1000, 0.3, 4);
        for fraction in [0.01, 0.06, 0.2] {
            let idx = stratified_subsample_indices(
                &labels,
                &LabelFractionSpec::new(fraction, 5),
            )
            .unwrap();
            let pos: isize = idx.iter().map(|&i| labels[i][0] as isize).sum();
            let want = (fraction * 300.0).round() as isize;
            assert!((pos - want).abs() <= 1, "fraction {fraction}: {pos} vs {want}");
            assert_eq!(idx.len(), (fraction * 1000.0).round() as usize);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let labels = binary_labels(300, 0.25, 6);
        let a = stratified_subsample_indices(&labels, &LabelFractionSpec::new(0.1, 7)).unwrap();
        let b = stratified_subsample_indices(&labels, &LabelFractionSpec::new(0.1, 7)).unwrap();
        let c = stratified_subsample_indices(&labels, &LabelFractionSpec::new(0.1, 8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn too_small_fraction_errors() {
        let labels = binary_labels(50, 0.5, 9);
        assert!(
            stratified_subsample_indices(&labels, &LabelFractionSpec::new(0.01, 0)).is_err()
        );
        assert!(
            stratified_subsample_indices(&labels, &LabelFractionSpec::new(1.5, 0)).is_err()
        );
    }

    #[test]
    fn multilabel_greedy_respects_rare_labels() {
        // 200 rows; rare label on 10 rows, common label on 100
        let mut labels: Vec<Vec<u8>> = (0..200)
            .map(|i| vec![u8::from(i < 10), u8::from(i % 2 == 0)])
            .collect();
        let mut rng = derive_rng(10, &[0x9a]);
        labels.shuffle(&mut rng);
        let idx =
            stratified_subsample_indices(&labels, &LabelFractionSpec::new(0.2, 11)).unwrap();
        let rare: isize = idx.iter().map(|&i| labels[i][0] as isize).sum();
        let common: isize = idx.iter().map(|&i| labels[i][1] as isize).sum();
        assert!((rare - 2).abs() <= 1, "rare positives {rare}");
        // common label may overshoot slightly through rare-positive overlap
        assert!((common - 20).abs() <= 3, "common positives {common}");
    }
}
