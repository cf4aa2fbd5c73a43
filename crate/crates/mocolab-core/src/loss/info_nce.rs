//! InfoNCE: one positive among K queued negatives as a (K+1)-way softmax
//! classification with target index 0.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Mean over the batch of
/// `-log( exp(q.k+ / t) / (exp(q.k+ / t) + sum_i exp(q.z_i / t)) )`,
/// assembled as log-sum-exp-stabilized softmax cross-entropy over the logit
/// rows `[q.k+, q.z_1, ..., q.z_K] / t`.
///
/// `k_pos` and `queue` must be gradient-free (stop-gradient on the key path
/// and queue entries); only the query carries gradients.
pub fn info_nce_loss<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k_pos: Var,
    queue: Var,
    temperature: f64,
) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (sq, sk, sz) = (
        g.value(q).shape().to_vec(),
        g.value(k_pos).shape().to_vec(),
        g.value(queue).shape().to_vec(),
    );
    if sq.len() != 2 || sk != sq {
        return Err(Error::dimension(
            "info_nce_loss",
            format!("q {sq:?} and k_pos {sk:?} must be matching B x d"),
        ));
    }
    if sz.len() != 2 || sz[1] != sq[1] {
        return Err(Error::dimension(
            "info_nce_loss",
            format!("queue {sz:?} does not match embedding dim {}", sq[1]),
        ));
    }
    if sz[0] == 0 {
        return Err(Error::Config("queue must hold at least one negative".into()));
    }
    if g.requires_grad(k_pos) || g.requires_grad(queue) {
        return Err(Error::usage(
            "info_nce_loss",
            "k_pos and queue must be detached (stop-gradient contract)",
        ));
    }
    let l_pos = g.rowwise_dot(q, k_pos)?;
    let l_neg = g.matmul_nt(q, queue)?;
    let logits = g.hstack_col(l_pos, l_neg)?;
    let scaled = g.scale(logits, 1.0 / temperature)?;
    let log_probs = g.log_softmax(scaled)?;
    let target = g.take_col(log_probs, 0)?;
    let nll = g.neg(target)?;
    g.mean_all(nll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    /// Independent scalar oracle: softmax cross-entropy with target 0 on the
    /// assembled logit rows, evaluated with plain f64 arithmetic.
    pub(crate) fn info_nce_oracle(q: &[Vec<f64>], k: &[Vec<f64>], queue: &[Vec<f64>], t: f64) -> f64 {
        let mut total = 0.0;
        for (qr, kr) in q.iter().zip(k) {
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut logits = vec![dot(qr, kr) / t];
            for neg in queue {
                logits.push(dot(qr, neg) / t);
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - logits[0];
        }
        total / q.len() as f64
    }

    fn run_loss(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, queue: Vec<Vec<f64>>, t: f64) -> f64 {
        let d = q[0].len();
        let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
        let mut g: Graph<f64> = Graph::new();
        let qv = g.leaf(Tensor::new(&[q.len(), d], flat(&q)).unwrap().requires_grad(true));
        let kv = g.constant(Tensor::new(&[k.len(), d], flat(&k)).unwrap());
        let zv = g.constant(Tensor::new(&[queue.len(), d], flat(&queue)).unwrap());
        let loss = info_nce_loss(&mut g, qv, kv, zv, t).unwrap();
        g.value(loss).item().unwrap()
    }

    #[test]
    fn uniform_similarities_give_ln_k_plus_1() {
        // all K+1 similarities equal -> uniform softmax -> loss = ln(K+1)
        let q = vec![vec![1.0, 0.0]];
        let k = vec![vec![1.0, 0.0]];
        let queue = vec![vec![1.0, 0.0]; 3];
        for t in [0.07, 0.5, 1.0] {
            let loss = run_loss(q.clone(), k.clone(), queue.clone(), t);
            assert!((loss - 4.0f64.ln()).abs() <= 1e-12, "loss {loss}");
        }
    }

    #[test]
    fn two_point_example_matches_direct_evaluation() {
        // q=[1,0], k+=[0.8,0.6], one negative [0,1], t=1:
        // logits [0.8, 0] -> loss = ln(1 + e^{-0.8})
        let loss = run_loss(
            vec![vec![1.0, 0.0]],
            vec![vec![0.8, 0.6]],
            vec![vec![0.0, 1.0]],
            1.0,
        );
        let direct = (1.0 + (-0.8f64).exp()).ln();
        assert!((loss - direct).abs() <= 1e-12);
        assert!((loss - 0.371101).abs() < 1e-6);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(21, &[0xce]);
        for _ in 0..25 {
            let b = rng.gen_range(1..5);
            let d = rng.gen_range(2..6);
            let kn = rng.gen_range(1..8);
            let mk = |rows: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                (0..rows)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
                    .collect::<Vec<_>>()
            };
            let (q, k, z) = (mk(b, &mut rng), mk(b, &mut rng), mk(kn, &mut rng));
            let t = rng.gen_range(0.05..1.0);
            let got = run_loss(q.clone(), k.clone(), z.clone(), t);
            let want = info_nce_oracle(&q, &k, &z, t);
            assert!((got - want).abs() <= 1e-10, "got {got}, want {want}");
            assert!(got >= 0.0, "InfoNCE must be nonnegative");
        }
    }

    #[test]
    fn loss_decreases_as_positive_similarity_rises() {
        let mut prev = f64::INFINITY;
        for pos in [0.0, 0.3, 0.6, 0.9] {
            let loss = run_loss(
                vec![vec![1.0, 0.0]],
                vec![vec![pos, (1.0 - pos * pos).sqrt()]],
                vec![vec![0.2, 0.9], vec![-0.5, 0.3]],
                0.2,
            );
            assert!(loss < prev, "loss not strictly decreasing");
            prev = loss;
        }
    }

    #[test]
    fn stop_gradient_contract_enforced() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(Tensor::<f64>::filled(&[1, 2], 0.5).requires_grad(true));
        let k = g.leaf(Tensor::<f64>::filled(&[1, 2], 0.5).requires_grad(true));
        let z = g.constant(Tensor::<f64>::filled(&[1, 2], 0.5));
        let err = info_nce_loss(&mut g, q, k, z, 0.07).unwrap_err();
        assert!(err.to_string().contains("stop-gradient"), "{err}");
    }

    #[test]
    fn config_errors() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(Tensor::<f64>::filled(&[1, 2], 0.5).requires_grad(true));
        let k = g.constant(Tensor::<f64>::filled(&[1, 2], 0.5));
        let z = g.constant(Tensor::<f64>::filled(&[1, 2], 0.5));
        assert!(info_nce_loss(&mut g, q, k, z, 0.0).is_err());
        let z_empty = g.constant(Tensor::<f64>::zeros(&[0, 2]));
        assert!(info_nce_loss(&mut g, q, k, z_empty, 0.07).is_err());
    }

    #[test]
    fn gradients_flow_only_into_query() {
        let mut g: Graph<f64> = Graph::new();
        let q = g.leaf(Tensor::new(&[1, 2], vec![0.6, 0.8]).unwrap().requires_grad(true));
        let k = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let z = g.constant(Tensor::new(&[2, 2], vec![0.0, 1.0, -1.0, 0.0]).unwrap());
        let loss = info_nce_loss(&mut g, q, k, z, 0.1).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(q).is_some());
        assert!(g.grad(k).is_none());
        assert!(g.grad(z).is_none());
    }
}
