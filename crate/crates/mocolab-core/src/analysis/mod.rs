//! Feature-quality instruments: CKA feature-reuse measurement, layer-wise
//! probing, and KS distance between output-logit distributions.

pub mod cka;
pub mod features;
pub mod ks;
pub mod probe;

pub use cka::{cka_rbf, CkaConfig};
pub use features::{extract_block_features, FeatureMatrix};
pub use ks::{ks_distance, KsConfig};
pub use probe::{layerwise_probe, ProbeOutcome};

use crate::data::Dataset;
use crate::error::Result;
use crate::nn::{Encoder, ParamSet};
use crate::tensor::Scalar;

/// Per-block CKA between two parameter sets of the same architecture on
/// held-out data — the feature-reuse protocol (pretrained vs fine-tuned
/// features, block by block).
pub fn cka_per_block<T: Scalar>(
    encoder: &Encoder,
    params_a: &ParamSet<T>,
    params_b: &ParamSet<T>,
    data: &Dataset<T>,
    cfg: &CkaConfig,
    batch_size: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for block in 1..=encoder.config().num_blocks {
        let fa = extract_block_features(encoder, params_a, &data.images, block, batch_size)?;
        let fb = extract_block_features(encoder, params_b, &data.images, block, batch_size)?;
        out.push((block, cka_rbf(&fa, &fb, cfg)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::BlockMask;
    use crate::nn::EncoderConfig;
    use crate::tensor::Tensor;
    use crate::train::{TrainConfig, TrainMode, Trainer};

    #[test]
    fn model_against_itself_is_one_per_block() {
        let cfg = TrainConfig {
            mode: TrainMode::Moco,
            batch_size: 4,
            queue_size: 8,
            seed: 23,
            encoder: EncoderConfig {
                num_blocks: 2,
                channels_per_block: vec![4, 8],
                in_channels: 1,
                input_size: (8, 8),
                embedding_dim: 8,
                block_pool_sizes: vec![(2, 2), (2, 2)],
                two_layer_head: false,
            },
            block_mask: BlockMask::all(2),
            ..TrainConfig::default()
        };
        let ckpt = Trainer::<f64>::new(cfg).unwrap().to_checkpoint();
        let encoder = Encoder::new(ckpt.config.encoder.clone()).unwrap();
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(24, &[1]);
        let images: Vec<Tensor<f64>> = (0..10)
            .map(|_| {
                Tensor::new(&[1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap()
            })
            .collect();
        let data = Dataset {
            labels: vec![vec![0]; images.len()],
            label_names: vec!["positive".into()],
            images,
        };
        let grid = cka_per_block(
            &encoder,
            &ckpt.query,
            &ckpt.query,
            &data,
            &CkaConfig::default(),
            4,
        )
        .unwrap();
        assert_eq!(grid.len(), 2);
        for (_, v) in grid {
            assert!((v - 1.0).abs() <= 1e-8);
        }
    }
}
