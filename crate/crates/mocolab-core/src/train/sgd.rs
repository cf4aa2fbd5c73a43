//! SGD with momentum and coupled weight decay:
//! `v <- mu*v + grad + wd*p; p <- p - lr*v`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: ParamSet<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            buffers: ParamSet::new(),
        }
    }

    /// Update every parameter that has a gradient entry. Buffer keys are
    /// namespaced so one optimizer can serve several parameter sets.
    pub fn step(
        &mut self,
        namespace: &str,
        params: &mut ParamSet<T>,
        grads: &BTreeMap<String, Vec<T>>,
    ) -> Result<()> {
        let lr = T::from_f64(self.learning_rate);
        let mu = T::from_f64(self.momentum);
        let wd = T::from_f64(self.weight_decay);
        for (name, grad) in grads {
            let p = params.get_mut(name)?;
            if p.numel() != grad.len() {
                return Err(Error::dimension(
                    "sgd_step",
                    format!("grad for {name} has {} values, param has {}", grad.len(), p.numel()),
                ));
            }
            let key = format!("{namespace}.{name}");
            if !self.buffers.contains(&key) {
                self.buffers.insert(key.clone(), Tensor::zeros(p.shape()));
            }
            let buf = self.buffers.get_mut(&key)?;
            for ((pv, &gv), bv) in p.data_mut().iter_mut().zip(grad).zip(buf.data_mut()) {
                *bv = mu * *bv + gv + wd * *pv;
                *pv -= lr * *bv;
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.learning_rate.to_le_bytes());
        buf.extend_from_slice(&self.momentum.to_le_bytes());
        buf.extend_from_slice(&self.weight_decay.to_le_bytes());
        w.write_all(&buf)?;
        self.buffers.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let read_err = |e: std::io::Error| Error::Data(format!("optimizer read failed: {e}"));
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(read_err)?;
        let learning_rate = f64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(read_err)?;
        let momentum = f64::from_le_bytes(b8);
        r.read_exact(&mut b8).map_err(read_err)?;
        let weight_decay = f64::from_le_bytes(b8);
        let buffers = ParamSet::read_from(r)?;
        Ok(Sgd {
            learning_rate,
            momentum,
            weight_decay,
            buffers,
        })
    }

    pub fn buffers_checksum(&self) -> u64 {
        self.buffers.checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::filled(&[2], v).requires_grad(true));
        p
    }

    #[test]
    fn plain_gradient_step() {
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        let mut params = one_param(1.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, -0.5]);
        opt.step("q", &mut params, &grads).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[0.95, 1.05]);
    }

    #[test]
    fn zero_grad_weight_decay_contracts_each_step() {
        // frozen-loss probe: grads identically zero, momentum 0
        let (lr, wd) = (0.3, 1e-2);
        let mut opt = Sgd::new(lr, 0.0, wd);
        let mut params = one_param(2.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        let mut expected = 2.0;
        for _ in 0..5 {
            opt.step("q", &mut params, &grads).unwrap();
            expected *= 1.0 - lr * wd;
            for &v in params.get("w").unwrap().data() {
                assert!((v - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn first_step_contraction_holds_with_momentum_buffer_empty() {
        let (lr, wd) = (0.3, 1e-4);
        let mut opt = Sgd::new(lr, 0.9, wd);
        let mut params = one_param(1.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        opt.step("q", &mut params, &grads).unwrap();
        for &v in params.get("w").unwrap().data() {
            assert!((v - 1.5 * (1.0 - lr * wd)).abs() < 1e-14);
        }
    }

    #[test]
    fn momentum_accumulates_like_pytorch() {
        // two steps with constant grad g: p2 = p0 - lr*g - lr*(mu*g + g)
        let (lr, mu, g) = (0.1, 0.9, 1.0);
        let mut opt = Sgd::new(lr, mu, 0.0);
        let mut params = one_param(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![g, g]);
        opt.step("q", &mut params, &grads).unwrap();
        opt.step("q", &mut params, &grads).unwrap();
        let want = -lr * g - lr * (mu * g + g);
        for &v in params.get("w").unwrap().data() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn namespaces_keep_buffers_apart() {
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        let mut pa = one_param(0.0);
        let mut pb = one_param(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0, 1.0]);
        opt.step("a", &mut pa, &grads).unwrap();
        opt.step("b", &mut pb, &grads).unwrap();
        assert_eq!(pa.get("w").unwrap().data(), pb.get("w").unwrap().data());
    }
}
