//! Classification metrics: Mann-Whitney AUROC (macro over labels) and F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// AUROC via the rank formulation of the Mann-Whitney statistic:
/// `P(score+ > score-) + 0.5 * P(tie)`. Exactly equals exhaustive pair
/// enumeration.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::dimension(
            "auroc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::numeric(
            "auroc",
            "undefined metric: both classes must be present",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let n = negatives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * n))
}

/// Unweighted mean over labels of the per-label AUROC. `scores` and
/// `labels` are n x L row-major.
pub fn auroc_macro(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(f64, Vec<f64>)> {
    let num_labels = check_matrix(scores, labels, "auroc_macro")?;
    let mut per_class = Vec::with_capacity(num_labels);
    for l in 0..num_labels {
        let col_scores: Vec<f64> = scores.iter().map(|r| r[l]).collect();
        let col_labels: Vec<u8> = labels.iter().map(|r| r[l]).collect();
        per_class.push(auroc(&col_scores, &col_labels)?);
    }
    let macro_v = per_class.iter().sum::<f64>() / num_labels as f64;
    Ok((macro_v, per_class))
}

/// `2PR / (P+R)`, defined 0 when there are neither true positives nor
/// predicted positives.
pub fn f1(predictions: &[u8], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::dimension(
            "f1",
            format!("{} predictions vs {} labels", predictions.len(), labels.len()),
        ));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 && fp == 0 && fn_ == 0 {
        return Ok(0.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Macro-averaged F1 of probability scores thresholded at 0.5.
pub fn f1_macro(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(f64, Vec<f64>)> {
    let num_labels = check_matrix(scores, labels, "f1_macro")?;
    let mut per_class = Vec::with_capacity(num_labels);
    for l in 0..num_labels {
        let preds: Vec<u8> = scores.iter().map(|r| u8::from(r[l] > 0.5)).collect();
        let col_labels: Vec<u8> = labels.iter().map(|r| r[l]).collect();
        per_class.push(f1(&preds, &col_labels)?);
    }
    let macro_v = per_class.iter().sum::<f64>() / num_labels as f64;
    Ok((macro_v, per_class))
}

/// Fraction of rows whose thresholded predictions match the labels on
/// every column.
pub fn accuracy(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<f64> {
    let _ = check_matrix(scores, labels, "accuracy")?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, l)| {
            s.iter()
                .zip(l.iter())
                .all(|(&sv, &lv)| u8::from(sv > 0.5) == lv)
        })
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

fn check_matrix(scores: &[Vec<f64>], labels: &[Vec<u8>], op: &str) -> Result<usize> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::dimension(
            op,
            format!("{} score rows vs {} label rows", scores.len(), labels.len()),
        ));
    }
    let num_labels = scores[0].len();
    if num_labels == 0
        || scores.iter().any(|r| r.len() != num_labels)
        || labels.iter().any(|r| r.len() != num_labels)
    {
        return Err(Error::dimension(op, "ragged score/label matrix"));
    }
    Ok(num_labels)
}

/// Which metric a fine-tuning or probing run optimizes and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "auroc_macro")]
    AurocMacro,
    #[serde(rename = "f1")]
    F1,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::AurocMacro => "auroc_macro",
            MetricKind::F1 => "f1",
        }
    }

    /// Macro value plus per-class values on probability scores.
    pub fn compute(self, scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<(f64, Vec<f64>)> {
        match self {
            MetricKind::AurocMacro => auroc_macro(scores, labels),
            MetricKind::F1 => f1_macro(scores, labels),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive pair-enumeration oracle.
    fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if i == j || li != 1 || lj != 0 {
                    continue;
                }
                total += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn perfect_separation_is_one() {
        let scores = [0.9, 0.8, 0.2, 0.1];
        let labels = [1, 1, 0, 0];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_give_half() {
        let scores = [0.5; 6];
        let labels = [1, 0, 1, 0, 1, 0];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn spec_example_point_75() {
        // labels [1,0,1,0], scores [0.9,0.8,0.3,0.1] -> 0.75 by pair counting
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [1, 0, 1, 0];
        assert_eq!(auroc_pairs(&scores, &labels), 0.75);
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn matches_pair_enumeration_exhaustively_small() {
        // every binary labeling and random scores for sizes <= 12
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(61, &[1]);
        for n in 2..=12usize {
            for _ in 0..20 {
                let scores: Vec<f64> = (0..n)
                    .map(|_| (rng.gen_range(0..6) as f64) / 5.0)
                    .collect();
                let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
                let pos: usize = labels.iter().map(|&v| v as usize).sum();
                if pos == 0 || pos == n {
                    continue;
                }
                let got = auroc(&scores, &labels).unwrap();
                let want = auroc_pairs(&scores, &labels);
                assert_eq!(got, want, "scores {scores:?} labels {labels:?}");
            }
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.65];
        let labels = [0, 0, 1, 1, 1];
        let base = auroc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| (5.0 * s).exp() + 7.0).collect();
        assert_eq!(auroc(&transformed, &labels).unwrap(), base);
    }

    #[test]
    fn single_class_undefined() {
        let err = auroc(&[0.1, 0.2], &[1, 1]).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn macro_is_mean_of_per_class() {
        let scores = vec![
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.7, 0.3],
            vec![0.1, 0.6],
        ];
        let labels = vec![vec![1, 0], vec![0, 1], vec![1, 1], vec![0, 0]];
        let (macro_v, per) = auroc_macro(&scores, &labels).unwrap();
        assert_eq!(per.len(), 2);
        assert_eq!(macro_v, (per[0] + per[1]) / 2.0);
    }

    #[test]
    fn f1_perfect_and_zero_conventions() {
        assert_eq!(f1(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        // zero predicted positives while positives exist -> recall 0 -> f1 0
        assert_eq!(f1(&[0, 0, 0], &[1, 0, 1]).unwrap(), 0.0);
        // no positives anywhere -> defined as 0
        assert_eq!(f1(&[0, 0], &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn f1_counting_oracle() {
        // TP=2, FP=1, FN=1 -> P=2/3, R=2/3, F1=2/3
        let preds = [1, 1, 1, 0, 0];
        let labels = [1, 1, 0, 1, 0];
        let got = f1(&preds, &labels).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
    }
}
