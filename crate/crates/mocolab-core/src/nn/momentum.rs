//! Query/key parameter pair with exponential-moving-average key updates.

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::tensor::Scalar;

/// Query parameters (gradient-trained) and a structurally identical key set
/// that only ever moves by EMA: `k <- m*k + (1-m)*q`, applied to every
/// entry including batch-norm buffers. The key set never carries
/// `requires_grad`.
#[derive(Debug, Clone)]
pub struct MomentumPair<T: Scalar> {
    pub query: ParamSet<T>,
    pub key: ParamSet<T>,
    momentum: f64,
}

impl<T: Scalar> MomentumPair<T> {
    /// The key set starts as an exact detached copy of the query set.
    pub fn new(query: ParamSet<T>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "encoder momentum must be in [0, 1], got {momentum}"
            )));
        }
        let key = query.detached_clone();
        Ok(MomentumPair {
            query,
            key,
            momentum,
        })
    }

    pub fn from_parts(query: ParamSet<T>, key: ParamSet<T>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "encoder momentum must be in [0, 1], got {momentum}"
            )));
        }
        if !query.structurally_matches(&key) {
            return Err(Error::Config(
                "query and key parameter sets differ in names or shapes".into(),
            ));
        }
        Ok(MomentumPair {
            query,
            key,
            momentum,
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// `k <- m*k + (1-m)*q` elementwise over every parameter.
    pub fn ema_update(&mut self) -> Result<()> {
        let m = T::from_f64(self.momentum);
        let one_minus = T::from_f64(1.0 - self.momentum);
        for (name, k) in self.key.iter_mut() {
            let q = self.query.get(name)?;
            if q.shape() != k.shape() {
                return Err(Error::dimension(
                    "ema_update",
                    format!("parameter {name} shapes diverged"),
                ));
            }
            for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m * *kv + one_minus * qv;
            }
        }
        Ok(())
    }
}
