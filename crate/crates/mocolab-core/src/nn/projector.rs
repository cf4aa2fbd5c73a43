//! Barlow Twins projector: global average pooling followed by three affine
//! layers, the first two trailed by ReLU and batch norm. Output width is
//! 2048 regardless of the tap's channel count.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::encoder::{batch_norm_layer, init_linear, linear_layer};
use crate::nn::params::{ParamSet, VarCache};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const BT_PROJECTOR_DIM: usize = 2048;

#[derive(Debug, Clone)]
pub struct BtProjector {
    in_channels: usize,
    output_dim: usize,
}

impl BtProjector {
    pub fn new(in_channels: usize) -> Self {
        BtProjector {
            in_channels,
            output_dim: BT_PROJECTOR_DIM,
        }
    }

    /// Reduced-width stack for gradient-check harnesses; the standard
    /// projector is always 2048 wide.
    pub fn with_output_dim(in_channels: usize, output_dim: usize) -> Self {
        BtProjector {
            in_channels,
            output_dim,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Parameter names are relative; callers absorb them under a prefix
    /// such as `bt_block3`.
    pub fn init_params<T: Scalar>(&self, rng: &mut impl Rng) -> ParamSet<T> {
        let mut p = ParamSet::new();
        let d = self.output_dim;
        init_linear(&mut p, rng, "lin1", d, self.in_channels);
        init_bn_1d(&mut p, "bn1", d);
        init_linear(&mut p, rng, "lin2", d, d);
        init_bn_1d(&mut p, "bn2", d);
        init_linear(&mut p, rng, "lin3", d, d);
        p
    }

    /// Pool a B x C x H x W tap to B x C and map it through the stack.
    pub fn project<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &mut ParamSet<T>,
        cache: &mut VarCache,
        prefix: &str,
        tap: Var,
        training: bool,
    ) -> Result<Var> {
        let shape = g.value(tap).shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::dimension(
                "bt_project",
                format!(
                    "tap shape {:?} does not match projector input channels {}",
                    shape, self.in_channels
                ),
            ));
        }
        let pooled = g.global_avg_pool2d(tap)?;
        let h = linear_layer(g, params, cache, pooled, &format!("{prefix}.lin1"))?;
        let h = g.relu(h)?;
        let h = batch_norm_layer(g, params, cache, h, &format!("{prefix}.bn1"), training)?;
        let h = linear_layer(g, params, cache, h, &format!("{prefix}.lin2"))?;
        let h = g.relu(h)?;
        let h = batch_norm_layer(g, params, cache, h, &format!("{prefix}.bn2"), training)?;
        linear_layer(g, params, cache, h, &format!("{prefix}.lin3"))
    }
}

fn init_bn_1d<T: Scalar>(p: &mut ParamSet<T>, name: &str, d: usize) {
    p.insert(format!("{name}.gamma"), Tensor::<T>::filled(&[d], T::ONE).requires_grad(true));
    p.insert(format!("{name}.beta"), Tensor::<T>::zeros(&[d]).requires_grad(true));
    p.insert(format!("{name}.running_mean"), Tensor::<T>::zeros(&[d]));
    p.insert(format!("{name}.running_var"), Tensor::<T>::filled(&[d], T::ONE));
}
