//! Training loop: two augmented views per image, query forward with
//! gradients, key forward detached, combined loss, SGD on the query side,
//! EMA on the key side, queue maintenance.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::loss::{barlow_twins_loss, combined_loss, cross_correlation, info_nce_loss, intermediate_mse_loss};
use crate::nn::{BtProjector, Encoder, MomentumPair, ParamSet, VarCache};
use crate::rng::{derive_rng, stream};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::train::augment::augment;
use crate::train::checkpoint::Checkpoint;
use crate::train::queue::NegativeQueue;
use crate::train::sgd::Sgd;
use crate::train::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step_in_epoch: usize,
    pub contrastive: f64,
    /// One entry per block; exactly 0.0 for blocks outside the active
    /// intermediate loss.
    pub per_block: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochCurve {
    pub epoch: usize,
    pub train_info_nce: f64,
    pub val_info_nce: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossCurves {
    pub rows: Vec<EpochCurve>,
}

impl LossCurves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_info_nce,val_info_nce\n");
        for r in &self.rows {
            let val = r
                .val_info_nce
                .map(|v| format!("{v:.17e}"))
                .unwrap_or_default();
            out.push_str(&format!("{},{:.17e},{}\n", r.epoch, r.train_info_nce, val));
        }
        out
    }
}

pub struct Trainer<T: Scalar> {
    cfg: TrainConfig,
    encoder: Encoder,
    pair: MomentumPair<T>,
    aux: ParamSet<T>,
    projectors: BTreeMap<usize, BtProjector>,
    queue: NegativeQueue<T>,
    opt: Sgd<T>,
    epoch: usize,
    global_step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone())?;
        let mut rng = derive_rng(cfg.seed, &[stream::PARAM_INIT, 1]);
        let query = encoder.init_params::<T>(&mut rng);
        let pair = MomentumPair::new(query, cfg.encoder_momentum)?;
        let (aux, projectors) = build_projectors(&cfg)?;
        let mut qrng = derive_rng(cfg.seed, &[stream::QUEUE_INIT]);
        let queue =
            NegativeQueue::init_random(cfg.queue_size, cfg.encoder.embedding_dim, &mut qrng)?;
        let opt = Sgd::new(cfg.learning_rate, cfg.sgd_momentum, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            encoder,
            pair,
            aux,
            projectors,
            queue,
            opt,
            epoch: 0,
            global_step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        ckpt.config.validate()?;
        let encoder = Encoder::new(ckpt.config.encoder.clone())?;
        let pair = MomentumPair::from_parts(ckpt.query, ckpt.key, ckpt.config.encoder_momentum)?;
        let (_, projectors) = build_projectors::<T>(&ckpt.config)?;
        Ok(Trainer {
            cfg: ckpt.config,
            encoder,
            pair,
            aux: ckpt.aux,
            projectors,
            queue: ckpt.queue,
            opt: ckpt.optimizer,
            epoch: ckpt.epoch,
            global_step: ckpt.global_step,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            query: self.pair.query.clone(),
            key: self.pair.key.clone(),
            aux: self.aux.clone(),
            optimizer: self.opt.clone(),
            queue: self.queue.clone(),
            epoch: self.epoch,
            global_step: self.global_step,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn queue(&self) -> &NegativeQueue<T> {
        &self.queue
    }

    pub fn pair(&self) -> &MomentumPair<T> {
        &self.pair
    }

    /// One optimization step over a batch of C x H x W images.
    pub fn train_step(&mut self, batch: &[Tensor<T>]) -> Result<StepReport> {
        if batch.len() < 2 {
            return Err(Error::usage(
                "train_step",
                format!("batch size must be >= 2 (batch norm), got {}", batch.len()),
            ));
        }
        let (x1, x2) = self.two_views(batch, stream::AUGMENT, self.global_step)?;

        // key forward, detached
        let (k_emb_t, k_tap_ts) = {
            let mut gk: Graph<T> = Graph::new();
            let mut cache = VarCache::new();
            let xk = gk.constant(x2);
            let (k_emb, k_taps) =
                self.encoder
                    .forward_with_taps(&mut gk, &mut self.pair.key, &mut cache, xk, true)?;
            let k_emb = if self.cfg.normalize_embeddings {
                gk.l2_normalize(k_emb)?
            } else {
                k_emb
            };
            let taps: Vec<Tensor<T>> = k_taps.iter().map(|&t| gk.value(t).clone()).collect();
            (gk.value(k_emb).clone(), taps)
        };

        // query forward and combined loss
        let mut g: Graph<T> = Graph::new();
        let mut cache_q = VarCache::new();
        let mut cache_aux = VarCache::new();
        let xq = g.constant(x1);
        let (q_emb, q_taps) =
            self.encoder
                .forward_with_taps(&mut g, &mut self.pair.query, &mut cache_q, xq, true)?;
        let q_n = if self.cfg.normalize_embeddings {
            g.l2_normalize(q_emb)?
        } else {
            q_emb
        };
        let k_const = g.constant(k_emb_t.clone());
        let queue_const = g.constant(self.queue.as_tensor());
        let contrastive = info_nce_loss(&mut g, q_n, k_const, queue_const, self.cfg.temperature)?;

        let scale = self.cfg.effective_scale();
        let num_blocks = self.cfg.encoder.num_blocks;
        let mut per_block_vars: Vec<Option<Var>> = vec![None; num_blocks];
        if scale > 0.0 && self.cfg.mode != TrainMode::Moco {
            match self.cfg.mode {
                TrainMode::MocoMse => {
                    let consts: Vec<Var> =
                        k_tap_ts.iter().map(|t| g.constant(t.clone())).collect();
                    let (vars, _) = intermediate_mse_loss(
                        &mut g,
                        &q_taps,
                        &consts,
                        &self.cfg.encoder.block_pool_sizes,
                        &self.cfg.block_mask,
                    )?;
                    per_block_vars = vars;
                }
                TrainMode::MocoBt => {
                    for block in self.cfg.block_mask.iter() {
                        let i = block - 1;
                        let proj = self.projectors.get(&block).ok_or_else(|| {
                            Error::Config(format!("no projector built for block {block}"))
                        })?;
                        let prefix = format!("bt_block{block}");
                        let za = proj.project(
                            &mut g,
                            &mut self.aux,
                            &mut cache_aux,
                            &prefix,
                            q_taps[i],
                            true,
                        )?;
                        let kb = g.constant(k_tap_ts[i].clone());
                        let zb = proj.project(
                            &mut g,
                            &mut self.aux,
                            &mut cache_aux,
                            &prefix,
                            kb,
                            true,
                        )?;
                        let c = cross_correlation(&mut g, za, zb)?;
                        per_block_vars[i] =
                            Some(barlow_twins_loss(&mut g, c, self.cfg.barlow_lambda)?);
                    }
                }
                TrainMode::Moco => unreachable!(),
            }
        }
        let total = combined_loss(&mut g, contrastive, &per_block_vars, scale, &self.cfg.block_mask)?;

        let contrastive_v = g.value(contrastive).item()?.to_f64();
        let per_block_v: Vec<f64> = per_block_vars
            .iter()
            .map(|o| o.map(|v| g.value(v).item().map(|x| x.to_f64())).transpose())
            .collect::<Result<Vec<Option<f64>>>>()?
            .into_iter()
            .map(|o| o.unwrap_or(0.0))
            .collect();
        let total_v = g.value(total).item()?.to_f64();

        g.backward(total)?;
        let mut sq_sum = 0.0f64;
        let q_grads = collect_grads(&g, &cache_q, &self.pair.query, &mut sq_sum)?;
        let aux_grads = collect_grads(&g, &cache_aux, &self.aux, &mut sq_sum)?;
        self.opt.step("query", &mut self.pair.query, &q_grads)?;
        self.opt.step("aux", &mut self.aux, &aux_grads)?;
        self.pair.ema_update()?;
        self.queue.enqueue_dequeue(&k_emb_t)?;
        let report = StepReport {
            epoch: self.epoch,
            step_in_epoch: 0,
            contrastive: contrastive_v,
            per_block: per_block_v,
            total: total_v,
            grad_norm: sq_sum.sqrt(),
        };
        self.global_step += 1;
        Ok(report)
    }

    /// InfoNCE on held-out images: both encoders in eval mode, queue frozen,
    /// views derived from step-independent streams so the metric is
    /// comparable across epochs.
    pub fn validation_info_nce(&mut self, val: &[Tensor<T>]) -> Result<f64> {
        if val.is_empty() {
            return Err(Error::usage("validation_info_nce", "empty validation set"));
        }
        let queue_t = self.queue.as_tensor();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (batch_idx, chunk) in val.chunks(self.cfg.batch_size).enumerate() {
            let (x1, x2) = self.two_views(chunk, stream::VAL_AUGMENT, batch_idx as u64)?;
            let mut gk: Graph<T> = Graph::new();
            let mut cache_k = VarCache::new();
            let xk = gk.constant(x2);
            let (k_emb, _) = self.encoder.forward_with_taps(
                &mut gk,
                &mut self.pair.key,
                &mut cache_k,
                xk,
                false,
            )?;
            let k_emb = if self.cfg.normalize_embeddings {
                gk.l2_normalize(k_emb)?
            } else {
                k_emb
            };
            let k_emb_t = gk.value(k_emb).clone();

            let mut g: Graph<T> = Graph::new();
            let mut cache_q = VarCache::new();
            let xq = g.constant(x1);
            let (q_emb, _) = self.encoder.forward_with_taps(
                &mut g,
                &mut self.pair.query,
                &mut cache_q,
                xq,
                false,
            )?;
            let q_n = if self.cfg.normalize_embeddings {
                g.l2_normalize(q_emb)?
            } else {
                q_emb
            };
            let kc = g.constant(k_emb_t);
            let qc = g.constant(queue_t.clone());
            let loss = info_nce_loss(&mut g, q_n, kc, qc, self.cfg.temperature)?;
            total += g.value(loss).item()?.to_f64() * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(total / count as f64)
    }

    /// Two augmented views per image; draws are independent per
    /// (seed, purpose, step, index, view) so batches are identical no
    /// matter how the augmentation pipeline is parallelized.
    fn two_views(
        &self,
        batch: &[Tensor<T>],
        purpose: u64,
        step_tag: u64,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let seed = self.cfg.seed;
        let policy = &self.cfg.augmentation;
        let pairs: Vec<Result<(Tensor<T>, Tensor<T>)>> =
            crate::tensor::kernels::map_indexed(batch.len(), |i| {
                let mut r1 = derive_rng(seed, &[purpose, step_tag, i as u64, 0]);
                let mut r2 = derive_rng(seed, &[purpose, step_tag, i as u64, 1]);
                Ok((
                    augment(&batch[i], policy, &mut r1)?,
                    augment(&batch[i], policy, &mut r2)?,
                ))
            });
        let mut v1 = Vec::with_capacity(batch.len());
        let mut v2 = Vec::with_capacity(batch.len());
        for p in pairs {
            let (a, b) = p?;
            v1.push(a);
            v2.push(b);
        }
        Ok((batch_tensor(&v1)?, batch_tensor(&v2)?))
    }
}

fn build_projectors<T: Scalar>(
    cfg: &TrainConfig,
) -> Result<(ParamSet<T>, BTreeMap<usize, BtProjector>)> {
    let mut aux = ParamSet::new();
    let mut projectors = BTreeMap::new();
    if cfg.mode == TrainMode::MocoBt {
        for block in cfg.block_mask.iter() {
            let ch = cfg.encoder.tap_channels(block - 1);
            let proj = BtProjector::with_output_dim(ch, cfg.bt_projector_dim);
            let mut rng = derive_rng(cfg.seed, &[stream::PARAM_INIT, 2, block as u64]);
            aux.absorb(&format!("bt_block{block}"), proj.init_params::<T>(&mut rng));
            projectors.insert(block, proj);
        }
    }
    Ok((aux, projectors))
}

fn collect_grads<T: Scalar>(
    g: &Graph<T>,
    cache: &VarCache,
    params: &ParamSet<T>,
    sq_sum: &mut f64,
) -> Result<BTreeMap<String, Vec<T>>> {
    let mut grads = BTreeMap::new();
    for (name, &var) in cache {
        if !params.get(name)?.needs_grad() {
            continue;
        }
        if let Some(grad) = g.grad(var) {
            *sq_sum += grad.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>();
            grads.insert(name.clone(), grad.to_vec());
        }
    }
    Ok(grads)
}

/// Stack C x H x W images into one B x C x H x W tensor.
pub fn batch_tensor<T: Scalar>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::usage("batch_tensor", "empty batch"));
    }
    let s = images[0].shape().to_vec();
    if s.len() != 3 {
        return Err(Error::dimension(
            "batch_tensor",
            format!("expected C x H x W images, got {s:?}"),
        ));
    }
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for img in images {
        if img.shape() != s.as_slice() {
            return Err(Error::dimension(
                "batch_tensor",
                "images in a batch must share a shape",
            ));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), s[0], s[1], s[2]], data)
}

/// Pretrain for `cfg.epochs`, logging per-step losses and per-epoch curves.
/// With an output directory, persists `training_log.csv`,
/// `loss_curves.csv`, and best/last checkpoints.
pub fn run_pretraining<T: Scalar>(
    cfg: TrainConfig,
    train: &[Tensor<T>],
    val: &[Tensor<T>],
    out_dir: Option<&Path>,
) -> Result<(Checkpoint<T>, LossCurves)> {
    if train.is_empty() {
        return Err(Error::Data("pretraining requires a nonempty train set".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut trainer = Trainer::<T>::new(cfg.clone())?;
    let mut curves = LossCurves::default();
    let mut log_rows: Vec<(StepReport, u64)> = Vec::new();
    let mut best_val = f64::INFINITY;

    for epoch in 0..cfg.epochs {
        trainer.epoch = epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut shuffle_rng = derive_rng(cfg.seed, &[stream::SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_contrastive = 0.0f64;
        let mut counted = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<Tensor<T>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let started = Instant::now();
            let mut report = trainer.train_step(&batch)?;
            report.step_in_epoch = step;
            epoch_contrastive += report.contrastive * chunk.len() as f64;
            counted += chunk.len();
            log_rows.push((report, started.elapsed().as_millis() as u64));
        }
        let train_info_nce = epoch_contrastive / counted.max(1) as f64;
        let val_info_nce = if val.is_empty() {
            None
        } else {
            Some(trainer.validation_info_nce(val)?)
        };
        curves.rows.push(EpochCurve {
            epoch,
            train_info_nce,
            val_info_nce,
        });
        if let (Some(dir), Some(v)) = (out_dir, val_info_nce) {
            if v < best_val {
                best_val = v;
                trainer.to_checkpoint().save(&dir.join("checkpoint_best.bin"))?;
            }
        }
    }
    trainer.epoch = cfg.epochs;
    let last = trainer.to_checkpoint();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        last.save(&dir.join("checkpoint_last.bin"))?;
        if !dir.join("checkpoint_best.bin").exists() {
            last.save(&dir.join("checkpoint_best.bin"))?;
        }
        write_training_log(&dir.join("training_log.csv"), &cfg, &log_rows)?;
        let curve_path = dir.join("loss_curves.csv");
        std::fs::write(&curve_path, curves.to_csv()).map_err(|e| Error::io(&curve_path, e))?;
    }
    Ok((last, curves))
}

/// CSV schema: epoch, step, contrastive_loss, {mse|bt}_block1..N, total,
/// grad_norm, wall_time_ms. The wall-time column is excluded from any
/// bit-identity comparison.
pub fn write_training_log(
    path: &Path,
    cfg: &TrainConfig,
    rows: &[(StepReport, u64)],
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let stem = cfg.mode.block_column_stem();
    let mut header = String::from("epoch,step,contrastive_loss");
    for b in 1..=cfg.encoder.num_blocks {
        header.push_str(&format!(",{stem}_block{b}"));
    }
    header.push_str(",total,grad_norm,wall_time_ms");
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for (r, wall) in rows {
        let mut line = format!("{},{},{:.17e}", r.epoch, r.step_in_epoch, r.contrastive);
        for v in &r.per_block {
            line.push_str(&format!(",{v:.17e}"));
        }
        line.push_str(&format!(",{:.17e},{:.17e},{wall}", r.total, r.grad_norm));
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EncoderConfig;
    use crate::train::augment::AugmentationPolicy;

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 1,
            batch_size: 4,
            queue_size: 8,
            seed: 77,
            encoder: EncoderConfig {
                num_blocks: 2,
                channels_per_block: vec![4, 8],
                in_channels: 1,
                input_size: (8, 8),
                embedding_dim: 16,
                block_pool_sizes: vec![(2, 2), (2, 2)],
                two_layer_head: false,
            },
            block_mask: crate::loss::BlockMask::all(2),
            bt_projector_dim: 8,
            ..TrainConfig::default()
        }
    }

    fn tiny_images(n: usize, seed: u64) -> Vec<Tensor<f64>> {
        use rand::Rng;
        (0..n)
            .map(|i| {
                let mut rng = derive_rng(seed, &[stream::SYNTHETIC, i as u64]);
                Tensor::new(&[1, 8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn moco_mode_reports_zero_intermediate_entries() {
        let mut t = Trainer::<f64>::new(tiny_cfg(TrainMode::Moco)).unwrap();
        let imgs = tiny_images(4, 1);
        let rep = t.train_step(&imgs).unwrap();
        assert_eq!(rep.per_block, vec![0.0, 0.0]);
        assert!(rep.total == rep.contrastive);
        assert!(rep.grad_norm > 0.0);
    }

    #[test]
    fn identical_views_through_identical_encoders_zero_mse() {
        let mut cfg = tiny_cfg(TrainMode::MocoMse);
        cfg.augmentation = AugmentationPolicy::identity();
        let mut t = Trainer::<f64>::new(cfg).unwrap();
        let imgs = tiny_images(4, 2);
        // key starts as an exact copy of query, identity policy makes the
        // views equal, so every pooled tap pair coincides
        let rep = t.train_step(&imgs).unwrap();
        for v in &rep.per_block {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn step_replay_from_checkpoint_is_bit_identical() {
        let mut t = Trainer::<f64>::new(tiny_cfg(TrainMode::MocoMse)).unwrap();
        let imgs = tiny_images(4, 3);
        t.train_step(&imgs).unwrap();
        let ckpt = t.to_checkpoint();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let restored = Checkpoint::<f64>::read_from(&mut buf.as_slice()).unwrap();
        let mut t2 = Trainer::from_checkpoint(restored).unwrap();

        let r1 = t.train_step(&imgs).unwrap();
        let r2 = t2.train_step(&imgs).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(
            t.to_checkpoint().digest(),
            t2.to_checkpoint().digest()
        );
    }

    #[test]
    fn scale_zero_trajectory_matches_plain_moco() {
        let imgs = tiny_images(8, 4);
        let run = |mode: TrainMode, scale: Option<f64>| {
            let mut cfg = tiny_cfg(mode);
            cfg.intermediate_scale = scale;
            let mut t = Trainer::<f64>::new(cfg).unwrap();
            let mut reports = Vec::new();
            for _ in 0..3 {
                reports.push(t.train_step(&imgs).unwrap());
            }
            let state = (
                t.pair.query.checksum(),
                t.pair.key.checksum(),
                t.opt.buffers_checksum(),
                t.queue.as_tensor().clone(),
            );
            (reports, state)
        };
        let (r_base, d_base) = run(TrainMode::Moco, None);
        let (r_mse0, d_mse0) = run(TrainMode::MocoMse, Some(0.0));
        for (a, b) in r_base.iter().zip(&r_mse0) {
            assert_eq!(a.contrastive.to_bits(), b.contrastive.to_bits());
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
        }
        assert_eq!(d_base, d_mse0);
    }

    #[test]
    fn query_and_key_eval_outputs_coincide_at_init() {
        // key starts as an exact copy, so eval-mode forwards agree bitwise
        let mut t = Trainer::<f64>::new(tiny_cfg(TrainMode::Moco)).unwrap();
        let imgs = tiny_images(2, 9);
        let x = batch_tensor(&imgs).unwrap();
        let enc = Encoder::new(t.cfg.encoder.clone()).unwrap();
        let run = |params: &mut crate::nn::ParamSet<f64>| {
            let mut g: Graph<f64> = Graph::new();
            let mut cache = crate::nn::VarCache::new();
            let xv = g.constant(x.clone());
            let (emb, _) = enc.forward_with_taps(&mut g, params, &mut cache, xv, false).unwrap();
            g.value(emb).data().to_vec()
        };
        let q = run(&mut t.pair.query);
        let k = run(&mut t.pair.key);
        assert_eq!(q, k);
    }

    #[test]
    fn bt_mode_produces_nonzero_block_losses() {
        let mut t = Trainer::<f64>::new(tiny_cfg(TrainMode::MocoBt)).unwrap();
        let imgs = tiny_images(4, 5);
        let rep = t.train_step(&imgs).unwrap();
        assert!(rep.per_block.iter().all(|&v| v > 0.0));
        assert!(rep.total > rep.contrastive);
    }

    #[test]
    fn zero_epoch_run_returns_initial_checkpoint_and_empty_curves() {
        let mut cfg = tiny_cfg(TrainMode::Moco);
        cfg.epochs = 0;
        let imgs = tiny_images(4, 6);
        let fresh_digest = Trainer::<f64>::new(cfg.clone()).unwrap().to_checkpoint().digest();
        let (ckpt, curves) = run_pretraining::<f64>(cfg, &imgs, &[], None).unwrap();
        assert!(curves.rows.is_empty());
        assert_eq!(ckpt.digest(), fresh_digest);
    }

    #[test]
    fn pretraining_emits_one_curve_row_per_epoch() {
        let mut cfg = tiny_cfg(TrainMode::Moco);
        cfg.epochs = 2;
        let imgs = tiny_images(6, 7);
        let val = tiny_images(4, 8);
        let (_, curves) = run_pretraining::<f64>(cfg, &imgs, &val, None).unwrap();
        assert_eq!(curves.rows.len(), 2);
        for r in &curves.rows {
            assert!(r.val_info_nce.is_some());
        }
    }
}
