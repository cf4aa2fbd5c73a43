//! Block-feature extraction: per example, the tap at a block is reduced to
//! a C-dimensional vector by global average pooling.

use crate::error::{Error, Result};
use crate::nn::{Encoder, ParamSet, VarCache};
use crate::tensor::{Graph, Scalar, Tensor};

/// n x C matrix of pooled block features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map(|r| r.len()).unwrap_or(0)
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let (n, d) = (self.len(), self.dim());
        let data = self
            .rows
            .iter()
            .flatten()
            .map(|&v| T::from_f64(v))
            .collect();
        Tensor::new(&[n, d], data)
    }
}

/// Eval-mode forward over `images`, pooling the tap of `block` (1-indexed).
pub fn extract_block_features<T: Scalar>(
    encoder: &Encoder,
    params: &ParamSet<T>,
    images: &[Tensor<T>],
    block: usize,
    batch_size: usize,
) -> Result<FeatureMatrix> {
    let num_blocks = encoder.config().num_blocks;
    if block == 0 || block > num_blocks {
        return Err(Error::Config(format!(
            "block {block} out of range; model has blocks 1..={num_blocks}"
        )));
    }
    if images.is_empty() {
        return Err(Error::Data("no images to extract features from".into()));
    }
    let mut rows = Vec::with_capacity(images.len());
    // eval mode never touches the running buffers, so work on a scratch copy
    let mut scratch = params.clone();
    for chunk in images.chunks(batch_size.max(1)) {
        let mut g: Graph<T> = Graph::new();
        let mut cache = VarCache::new();
        let x = g.constant(crate::train::engine::batch_tensor(chunk)?);
        let (_, taps) = encoder.forward_with_taps(&mut g, &mut scratch, &mut cache, x, false)?;
        let pooled = g.global_avg_pool2d(taps[block - 1])?;
        let t = g.value(pooled);
        let d = t.shape()[1];
        for row in t.data().chunks(d) {
            rows.push(row.iter().map(|v| v.to_f64()).collect());
        }
    }
    Ok(FeatureMatrix { rows })
}
