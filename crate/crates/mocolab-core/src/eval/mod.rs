//! Downstream evaluation: stratified subsampling, LL/E2E fine-tuning,
//! AUROC/F1, bootstrap confidence intervals.

pub mod bootstrap;
pub mod finetune;
pub mod metrics;
pub mod subsample;

pub use bootstrap::{bootstrap_ci, BootstrapResult, CiMethod};
pub use finetune::{fine_tune, FineTuneConfig, FineTuneMode, FineTunedModel};
pub use metrics::{accuracy, auroc, auroc_macro, f1, f1_macro, MetricKind};
pub use subsample::{stratified_subsample, stratified_subsample_indices, LabelFractionSpec};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Point estimate, per-class values, and bootstrap interval for one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub per_class: Vec<f64>,
    #[serde(flatten)]
    pub bootstrap: BootstrapResult,
}

/// Compute a metric with its bootstrap CI on probability scores.
pub fn metric_report(
    kind: MetricKind,
    scores: &[Vec<f64>],
    labels: &[Vec<u8>],
    replicates: usize,
    seed: u64,
    method: CiMethod,
) -> Result<MetricReport> {
    let (_, per_class) = kind.compute(scores, labels)?;
    let bootstrap = bootstrap_ci(
        |s, l| kind.compute(s, l).map(|v| v.0),
        scores,
        labels,
        replicates,
        seed,
        method,
    )?;
    Ok(MetricReport {
        metric: kind.name().to_string(),
        per_class,
        bootstrap,
    })
}
