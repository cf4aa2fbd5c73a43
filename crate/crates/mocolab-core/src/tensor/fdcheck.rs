//! Central finite-difference verification of backward rules.
//!
//! The checker re-evaluates the loss through a fresh graph per perturbed
//! coordinate, compares against the analytic gradients from one backward
//! pass, and reports the worst relative deviation. Always runs in f64.

use crate::error::{Error, Result};
use crate::tensor::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Check the gradients of `build` (a parameters -> scalar loss function
/// expressed as graph construction) against central differences.
///
/// Returns `max over coordinates of |analytic - numeric| / max(1, |numeric|)`.
/// Two evaluations at the unperturbed point must agree bit-for-bit; if they
/// do not, the function under test is non-deterministic and a usage error is
/// returned.
pub fn finite_difference_check<B>(build: &B, params: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite_difference_check eps must be positive, got {eps}"
        )));
    }
    if params.is_empty() {
        return Err(Error::usage("finite_difference_check", "no parameters given"));
    }

    let eval = |theta: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = theta
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(with_grad);
                g.leaf(t)
            })
            .collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).item()?;
        let grads = if with_grad {
            g.backward(loss)?;
            vars.iter()
                .zip(theta)
                .map(|(&v, t)| {
                    g.grad(v)
                        .map(|s| s.to_vec())
                        .unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (base_value, analytic) = eval(params, true)?;
    let (replay_value, _) = eval(params, false)?;
    if base_value.to_bits() != replay_value.to_bits() {
        return Err(Error::usage(
            "finite_difference_check",
            format!("function is non-deterministic: {base_value} vs {replay_value} at the same point"),
        ));
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.numel() {
            let original = param.data()[ci];
            work[pi].data_mut()[ci] = original + eps;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = original - eps;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[ci] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic[pi][ci] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
