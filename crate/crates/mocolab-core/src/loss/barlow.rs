//! Barlow Twins: cross-correlation matrix of two projected batches, pushed
//! toward the identity by an invariance term on the diagonal and a
//! redundancy-reduction term on the off-diagonals.

use crate::error::{Error, Result};
use crate::tensor::graph::{accumulate, BackFn};
use crate::tensor::{kernels, Graph, Scalar, Tensor, Var};

/// `C[i,j] = sum_b zA[b,i] * zB[b,j] / (||zA[:,i]|| * ||zB[:,j]||)`,
/// exactly as written — no mean-centering. Entries are bounded in [-1, 1]
/// by Cauchy-Schwarz; a violation beyond 1e-9 is reported as a numeric error.
pub fn cross_correlation<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var) -> Result<Var> {
    g.check_open("cross_correlation")?;
    let (sa, sb) = (g.value(za).shape().to_vec(), g.value(zb).shape().to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::dimension(
            "cross_correlation",
            format!("zA {sa:?} and zB {sb:?} must be matching b x d"),
        ));
    }
    let (b, d) = (sa[0], sa[1]);
    if b < 2 {
        return Err(Error::dimension(
            "cross_correlation",
            format!("batch size must be >= 2, got {b}"),
        ));
    }
    let (ad, bd) = (g.value(za).data(), g.value(zb).data());
    let col_norms = |m: &[T], side: &str| -> Result<Vec<T>> {
        let mut norms = vec![T::ZERO; d];
        for (j, norm) in norms.iter_mut().enumerate() {
            let mut sq = T::ZERO;
            for r in 0..b {
                let v = m[r * d + j];
                sq += v * v;
            }
            let n = sq.sqrt();
            if n.to_f64() <= 1e-12 {
                return Err(Error::numeric(
                    "cross_correlation",
                    format!("column {j} of {side} has near-zero norm"),
                ));
            }
            *norm = n;
        }
        Ok(norms)
    };
    let na = col_norms(ad, "zA")?;
    let nb = col_norms(bd, "zB")?;

    // numerator = zA^T @ zB, then scaled by the outer inverse norms
    let mut c = kernels::matmul_tn(ad, bd, b, d, d);
    for i in 0..d {
        let inv_i = T::ONE / na[i];
        for j in 0..d {
            c[i * d + j] *= inv_i / nb[j];
        }
    }
    for (idx, &v) in c.iter().enumerate() {
        let vf = v.to_f64();
        if !vf.is_finite() || vf.abs() > 1.0 + 1e-9 {
            return Err(Error::numeric(
                "cross_correlation",
                format!("entry ({}, {}) = {vf} outside [-1, 1]", idx / d, idx % d),
            ));
        }
    }
    let out = Tensor::new(&[d, d], c)?;
    let (ra, rb) = (g.requires_grad(za), g.requires_grad(zb));
    let requires = ra || rb;
    let out_id_hint = g.len();
    let back: Option<BackFn<T>> = requires.then(|| {
        let (aid, bid) = (za.id, zb.id);
        Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
            let ad = values[aid].data();
            let bd = values[bid].data();
            let cd = values[out_id_hint].data();
            if ra {
                // row_dot[i] = sum_j G[i,j] * C[i,j]
                let mut row_dot = vec![T::ZERO; d];
                for i in 0..d {
                    let mut acc = T::ZERO;
                    for j in 0..d {
                        acc += gout[i * d + j] * cd[i * d + j];
                    }
                    row_dot[i] = acc;
                }
                accumulate(grads, aid, b * d, |slot| {
                    for r in 0..b {
                        for i in 0..d {
                            // sum_j G[i,j] * zB[r,j] / nb[j]
                            let mut acc = T::ZERO;
                            for j in 0..d {
                                acc += gout[i * d + j] * bd[r * d + j] / nb[j];
                            }
                            let inv_na = T::ONE / na[i];
                            slot[r * d + i] +=
                                acc * inv_na - ad[r * d + i] * row_dot[i] * inv_na * inv_na;
                        }
                    }
                });
            }
            if rb {
                let mut col_dot = vec![T::ZERO; d];
                for j in 0..d {
                    let mut acc = T::ZERO;
                    for i in 0..d {
                        acc += gout[i * d + j] * cd[i * d + j];
                    }
                    col_dot[j] = acc;
                }
                accumulate(grads, bid, b * d, |slot| {
                    for r in 0..b {
                        for j in 0..d {
                            let mut acc = T::ZERO;
                            for i in 0..d {
                                acc += gout[i * d + j] * ad[r * d + i] / na[i];
                            }
                            let inv_nb = T::ONE / nb[j];
                            slot[r * d + j] +=
                                acc * inv_nb - bd[r * d + j] * col_dot[j] * inv_nb * inv_nb;
                        }
                    }
                });
            }
        }) as BackFn<T>
    });
    Ok(g.push_node(out, requires, back))
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow_twins_loss<T: Scalar>(g: &mut Graph<T>, c: Var, lambda: f64) -> Result<Var> {
    g.check_open("barlow_twins_loss")?;
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
    }
    let sc = g.value(c).shape().to_vec();
    if sc.len() != 2 || sc[0] != sc[1] {
        return Err(Error::dimension(
            "barlow_twins_loss",
            format!("cross-correlation matrix must be square, got {sc:?}"),
        ));
    }
    let d = sc[0];
    let cd = g.value(c).data();
    let lam = T::from_f64(lambda);
    let mut invariance = T::ZERO;
    let mut redundancy = T::ZERO;
    for i in 0..d {
        for j in 0..d {
            let v = cd[i * d + j];
            if i == j {
                let gap = T::ONE - v;
                invariance += gap * gap;
            } else {
                redundancy += v * v;
            }
        }
    }
    let out = Tensor::scalar(invariance + lam * redundancy);
    out.validate_finite("barlow_twins_loss")?;
    let requires = g.requires_grad(c);
    let back: Option<BackFn<T>> = requires.then(|| {
        let cid = c.id;
        let two = T::from_f64(2.0);
        Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
            let cd = values[cid].data();
            let gl = gout[0];
            accumulate(grads, cid, d * d, |slot| {
                for i in 0..d {
                    for j in 0..d {
                        let v = cd[i * d + j];
                        slot[i * d + j] += if i == j {
                            -two * (T::ONE - v) * gl
                        } else {
                            two * lam * v * gl
                        };
                    }
                }
            });
        }) as BackFn<T>
    });
    Ok(g.push_node(out, requires, back))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Brute-force oracle over i, j, b.
    fn cc_oracle(za: &[Vec<f64>], zb: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (b, d) = (za.len(), za[0].len());
        let norm = |m: &[Vec<f64>], j: usize| -> f64 {
            (0..b).map(|r| m[r][j] * m[r][j]).sum::<f64>().sqrt()
        };
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let num: f64 = (0..b).map(|r| za[r][i] * zb[r][j]).sum();
                        num / (norm(za, i) * norm(zb, j))
                    })
                    .collect()
            })
            .collect()
    }

    fn bt_oracle(c: &[Vec<f64>], lambda: f64) -> f64 {
        let d = c.len();
        let mut inv = 0.0;
        let mut red = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i == j {
                    inv += (1.0 - c[i][j]).powi(2);
                } else {
                    red += c[i][j].powi(2);
                }
            }
        }
        inv + lambda * red
    }

    fn run_cc(za: Vec<Vec<f64>>, zb: Vec<Vec<f64>>) -> Result<Vec<f64>> {
        let (b, d) = (za.len(), za[0].len());
        let flat = |m: &[Vec<f64>]| m.iter().flatten().copied().collect::<Vec<f64>>();
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::new(&[b, d], flat(&za))?);
        let bb = g.constant(Tensor::new(&[b, d], flat(&zb))?);
        let c = cross_correlation(&mut g, a, bb)?;
        Ok(g.value(c).data().to_vec())
    }

    #[test]
    fn orthogonal_equal_norm_columns_give_identity() {
        let za = vec![vec![1.0, 1.0], vec![1.0, -1.0]];
        let c = run_cc(za.clone(), za).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12);
        assert!(c[1].abs() < 1e-12);
        assert!(c[2].abs() < 1e-12);
        assert!((c[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_perfectly_redundant() {
        let za = vec![vec![0.5, 0.5], vec![-1.2, -1.2]];
        let c = run_cc(za.clone(), za).unwrap();
        for v in c {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_double_loop_oracle() {
        let za = vec![vec![1.0, 0.0], vec![-1.0, 2.0]];
        let zb = vec![vec![0.0, 1.0], vec![2.0, 1.0]];
        let want = cc_oracle(&za, &zb);
        let got = run_cc(za, zb).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((got[i * 2 + j] - want[i][j]).abs() <= 1e-10);
            }
        }
        // spot values: C10 = 1 (a1.b0 / (2*2) = 4/4), C01 = 0
        assert!((got[2] - 1.0).abs() < 1e-12);
        assert!(got[1].abs() < 1e-12);
    }

    #[test]
    fn transpose_symmetry_between_argument_orders() {
        let mut rng = crate::rng::derive_rng(31, &[1]);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        };
        let (za, zb) = (mk(&mut rng), mk(&mut rng));
        let ab = run_cc(za.clone(), zb.clone()).unwrap();
        let ba = run_cc(zb, za).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((ab[i * 4 + j] - ba[j * 4 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_column_names_the_column() {
        let za = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let err = run_cc(za.clone(), za).unwrap_err();
        assert!(err.to_string().contains("column 1"), "{err}");
    }

    #[test]
    fn batch_of_one_rejected() {
        let err = run_cc(vec![vec![1.0, 2.0]], vec![vec![1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn identity_matrix_gives_zero_loss() {
        let mut g: Graph<f64> = Graph::new();
        let c = g.constant(Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let l = barlow_twins_loss(&mut g, c, 5e-3).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn all_ones_matrix_is_pure_redundancy() {
        let d = 5;
        let lambda = 0.25;
        let mut g: Graph<f64> = Graph::new();
        let c = g.constant(Tensor::filled(&[d, d], 1.0));
        let l = barlow_twins_loss(&mut g, c, lambda).unwrap();
        let want = lambda * (d * (d - 1)) as f64;
        assert!((g.value(l).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn random_matrix_matches_oracle() {
        let mut rng = crate::rng::derive_rng(32, &[2]);
        let c: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let lambda = 0.4;
        let want = bt_oracle(&c, lambda);
        let mut g: Graph<f64> = Graph::new();
        let cv = g.constant(Tensor::new(&[4, 4], c.into_iter().flatten().collect()).unwrap());
        let l = barlow_twins_loss(&mut g, cv, lambda).unwrap();
        assert!((g.value(l).item().unwrap() - want).abs() <= 1e-12);
    }

    #[test]
    fn negative_lambda_is_config_error() {
        let mut g: Graph<f64> = Graph::new();
        let c = g.constant(Tensor::<f64>::filled(&[2, 2], 0.5));
        assert!(matches!(
            barlow_twins_loss(&mut g, c, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_through_cc_and_loss_passes_fd() {
        use crate::tensor::fdcheck::{finite_difference_check, DEFAULT_EPS};
        let mut rng = crate::rng::derive_rng(33, &[3]);
        let mk = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            Tensor::new(&[n / 4, 4], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let za = mk(&mut rng, 12);
        let zb = mk(&mut rng, 12);
        let err = finite_difference_check(
            &|g, vars| {
                let c = cross_correlation(g, vars[0], vars[1])?;
                barlow_twins_loss(g, c, 5e-3)
            },
            &[za, zb],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err <= 1e-4, "fd error {err}");
    }
}
