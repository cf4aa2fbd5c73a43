//! Layer-wise probing: a single linear classifier trained on frozen pooled
//! features of one block.

use crate::analysis::features::extract_block_features;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::bootstrap::CiMethod;
use crate::eval::finetune::{features_logits, logits_to_probs, train_linear_head, FineTuneConfig};
use crate::eval::{metric_report, MetricReport};
use crate::nn::encoder::init_linear;
use crate::nn::{Encoder, ParamSet};
use crate::rng::{derive_rng, stream};
use crate::tensor::Scalar;
use crate::train::checkpoint::Checkpoint;

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub block: usize,
    pub report: MetricReport,
    /// Raw pre-sigmoid test logits, one row per example (input to KS).
    pub test_logits: Vec<Vec<f64>>,
    /// Sigmoid probabilities of the test logits.
    pub test_scores: Vec<Vec<f64>>,
    pub val_history: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Train a linear probe on the pooled features of `block` (1-indexed) and
/// report the configured metric with a bootstrap CI on the test split.
/// The encoder itself is never modified.
pub fn layerwise_probe<T: Scalar>(
    checkpoint: &Checkpoint<T>,
    block: usize,
    train: &Dataset<T>,
    val: &Dataset<T>,
    test: &Dataset<T>,
    cfg: &FineTuneConfig,
    replicates: usize,
    ci: CiMethod,
) -> Result<ProbeOutcome> {
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Data("probe needs nonempty train/val/test".into()));
    }
    let encoder = Encoder::new(checkpoint.config.encoder.clone())?;
    let params = &checkpoint.query;
    let frozen_before = params.checksum();

    let feats_train = extract_block_features(&encoder, params, &train.images, block, cfg.batch_size)?;
    let feats_val = extract_block_features(&encoder, params, &val.images, block, cfg.batch_size)?;
    let feats_test = extract_block_features(&encoder, params, &test.images, block, cfg.batch_size)?;

    let dim = feats_train.dim();
    let num_labels = train.num_labels();
    let mut head = ParamSet::new();
    let mut rng = derive_rng(cfg.seed, &[stream::HEAD_INIT, block as u64]);
    init_linear::<T>(&mut head, &mut rng, "classifier", num_labels, dim);

    let (head, val_history, best_epoch) = train_linear_head(
        &feats_train.to_tensor::<T>()?,
        &train.labels,
        &feats_val.to_tensor::<T>()?,
        &val.labels,
        head,
        cfg,
    )?;
    if params.checksum() != frozen_before {
        return Err(Error::usage(
            "layerwise_probe",
            "freeze contract violated: encoder parameters changed",
        ));
    }
    let test_logits = features_logits(&feats_test.to_tensor::<T>()?, &head)?;
    let test_scores = logits_to_probs(test_logits.clone());
    let report = metric_report(cfg.metric, &test_scores, &test.labels, replicates, cfg.seed, ci)?;
    Ok(ProbeOutcome {
        block,
        report,
        test_logits,
        test_scores,
        val_history,
        best_epoch,
    })
}
