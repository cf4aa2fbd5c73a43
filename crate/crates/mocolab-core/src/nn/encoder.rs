//! Block-structured convolutional encoder with per-block intermediate taps.
//!
//! Each block is two 3x3 convolutions (the second with stride 2) each
//! followed by batch norm and ReLU, so spatial size halves per block. The
//! embedding is produced from the last tap by global average pooling and a
//! projection head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::{bind_var, ParamSet, VarCache};
use crate::nn::{BN_EPS, BN_MOMENTUM};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub channels_per_block: Vec<usize>,
    pub in_channels: usize,
    pub input_size: (usize, usize),
    pub embedding_dim: usize,
    /// Adaptive-pool target per block for the intermediate MSE loss.
    pub block_pool_sizes: Vec<(usize, usize)>,
    /// Two-layer projection head instead of the default single affine map.
    pub two_layer_head: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_blocks: 4,
            channels_per_block: vec![16, 32, 64, 128],
            in_channels: 3,
            input_size: (32, 32),
            embedding_dim: 128,
            block_pool_sizes: vec![(8, 8), (8, 8), (2, 2), (2, 2)],
            two_layer_head: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if self.channels_per_block.len() != self.num_blocks
            || self.block_pool_sizes.len() != self.num_blocks
        {
            return Err(Error::Config(format!(
                "channels_per_block ({}) and block_pool_sizes ({}) must both have num_blocks ({}) entries",
                self.channels_per_block.len(),
                self.block_pool_sizes.len(),
                self.num_blocks
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        for (i, &(ph, pw)) in self.block_pool_sizes.iter().enumerate() {
            let (th, tw) = self.tap_spatial(i);
            if ph == 0 || pw == 0 || ph > th || pw > tw {
                return Err(Error::Config(format!(
                    "block {} pool size {}x{} invalid for tap spatial {}x{}",
                    i + 1,
                    ph,
                    pw,
                    th,
                    tw
                )));
            }
        }
        Ok(())
    }

    /// Spatial size of the tap after block `i` (0-based): one stride-2
    /// 3x3 conv (pad 1) per block.
    pub fn tap_spatial(&self, block: usize) -> (usize, usize) {
        let halve = |mut s: usize, times: usize| {
            for _ in 0..times {
                s = (s - 1) / 2 + 1;
            }
            s
        };
        (
            halve(self.input_size.0, block + 1),
            halve(self.input_size.1, block + 1),
        )
    }

    pub fn tap_channels(&self, block: usize) -> usize {
        self.channels_per_block[block]
    }
}

pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Encoder { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Initialize trainable parameters and batch-norm buffers from `rng`.
    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut params = ParamSet::new();
        let mut in_ch = self.cfg.in_channels;
        for (i, &ch) in self.cfg.channels_per_block.iter().enumerate() {
            let pre = format!("block{}", i + 1);
            init_conv(&mut params, rng, &format!("{pre}.conv1"), ch, in_ch, 3);
            init_bn(&mut params, &format!("{pre}.bn1"), ch);
            init_conv(&mut params, rng, &format!("{pre}.conv2"), ch, ch, 3);
            init_bn(&mut params, &format!("{pre}.bn2"), ch);
            in_ch = ch;
        }
        let last = *self.cfg.channels_per_block.last().expect("validated nonempty");
        if self.cfg.two_layer_head {
            init_linear(&mut params, rng, "head.fc1", last, last);
            init_linear(&mut params, rng, "head.fc2", self.cfg.embedding_dim, last);
        } else {
            init_linear(&mut params, rng, "head.fc1", self.cfg.embedding_dim, last);
        }
        params
    }

    /// Forward pass returning the embedding and all block taps
    /// (shallow to deep). Train mode folds batch statistics into the
    /// running buffers of `params`.
    pub fn forward_with_taps<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &mut ParamSet<T>,
        cache: &mut VarCache,
        images: Var,
        training: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let shape = g.value(images).shape().to_vec();
        let want = [
            shape.first().copied().unwrap_or(0),
            self.cfg.in_channels,
            self.cfg.input_size.0,
            self.cfg.input_size.1,
        ];
        if shape.len() != 4 || shape[1..] != want[1..] {
            return Err(Error::dimension(
                "forward_with_taps",
                format!(
                    "input shape {:?} does not match configured {}x{}x{}",
                    shape, self.cfg.in_channels, self.cfg.input_size.0, self.cfg.input_size.1
                ),
            ));
        }
        let mut x = images;
        let mut taps = Vec::with_capacity(self.cfg.num_blocks);
        for i in 0..self.cfg.num_blocks {
            let pre = format!("block{}", i + 1);
            x = conv_bn_relu(g, params, cache, x, &format!("{pre}.conv1"), &format!("{pre}.bn1"), 1, training)?;
            x = conv_bn_relu(g, params, cache, x, &format!("{pre}.conv2"), &format!("{pre}.bn2"), 2, training)?;
            taps.push(x);
        }
        let pooled = g.global_avg_pool2d(x)?;
        let emb = if self.cfg.two_layer_head {
            let h = linear_layer(g, params, cache, pooled, "head.fc1")?;
            let h = g.relu(h)?;
            linear_layer(g, params, cache, h, "head.fc2")?
        } else {
            linear_layer(g, params, cache, pooled, "head.fc1")?
        };
        Ok((emb, taps))
    }
}

fn init_conv<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut impl Rng,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) {
    let fan_in = (c_in * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    params.insert(
        format!("{name}.weight"),
        uniform_tensor(rng, &[c_out, c_in, k, k], bound).requires_grad(true),
    );
    params.insert(
        format!("{name}.bias"),
        Tensor::<T>::zeros(&[c_out]).requires_grad(true),
    );
}

fn init_bn<T: Scalar>(params: &mut ParamSet<T>, name: &str, ch: usize) {
    params.insert(format!("{name}.gamma"), Tensor::<T>::filled(&[ch], T::ONE).requires_grad(true));
    params.insert(format!("{name}.beta"), Tensor::<T>::zeros(&[ch]).requires_grad(true));
    params.insert(format!("{name}.running_mean"), Tensor::<T>::zeros(&[ch]));
    params.insert(format!("{name}.running_var"), Tensor::<T>::filled(&[ch], T::ONE));
}

pub fn init_linear<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut impl Rng,
    name: &str,
    out_f: usize,
    in_f: usize,
) {
    let bound = 1.0 / (in_f as f64).sqrt();
    params.insert(
        format!("{name}.weight"),
        uniform_tensor(rng, &[out_f, in_f], bound).requires_grad(true),
    );
    params.insert(
        format!("{name}.bias"),
        uniform_tensor(rng, &[out_f], bound).requires_grad(true),
    );
}

pub(crate) fn uniform_tensor<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape/data consistent by construction")
}

pub(crate) fn conv_bn_relu<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParamSet<T>,
    cache: &mut VarCache,
    x: Var,
    conv: &str,
    bn: &str,
    stride: usize,
    training: bool,
) -> Result<Var> {
    let w = bind_var(g, params, cache, &format!("{conv}.weight"))?;
    let b = bind_var(g, params, cache, &format!("{conv}.bias"))?;
    let y = g.conv2d(x, w, b, stride, 1)?;
    let y = batch_norm_layer(g, params, cache, y, bn, training)?;
    g.relu(y)
}

pub(crate) fn batch_norm_layer<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParamSet<T>,
    cache: &mut VarCache,
    x: Var,
    bn: &str,
    training: bool,
) -> Result<Var> {
    let gamma = bind_var(g, params, cache, &format!("{bn}.gamma"))?;
    let beta = bind_var(g, params, cache, &format!("{bn}.beta"))?;
    let rm_name = format!("{bn}.running_mean");
    let rv_name = format!("{bn}.running_var");
    let mut rm = params.take(&rm_name)?;
    let mut rv = params.take(&rv_name)?;
    let out = g.batch_norm(x, gamma, beta, &mut rm, &mut rv, training, BN_EPS, BN_MOMENTUM);
    params.insert(rm_name, rm);
    params.insert(rv_name, rv);
    out
}

pub(crate) fn linear_layer<T: Scalar>(
    g: &mut Graph<T>,
    params: &mut ParamSet<T>,
    cache: &mut VarCache,
    x: Var,
    name: &str,
) -> Result<Var> {
    let w = bind_var(g, params, cache, &format!("{name}.weight"))?;
    let b = bind_var(g, params, cache, &format!("{name}.bias"))?;
    g.linear(x, w, b)
}
