//! Centered kernel alignment with an RBF kernel.
//!
//! `sigma` for each matrix defaults to `sigma_fraction` times the median
//! pairwise Euclidean distance of that matrix (the convention of the CKA
//! literature); an absolute-sigma mode is available.

use serde::{Deserialize, Serialize};

use crate::analysis::features::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::kernels::for_each_chunk;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CkaConfig {
    pub sigma_fraction: f64,
    /// When set, used directly as sigma for both matrices.
    pub absolute_sigma: Option<f64>,
    /// Cap on the number of examples used (rows beyond it are ignored).
    pub sample_budget: Option<usize>,
}

impl Default for CkaConfig {
    fn default() -> Self {
        CkaConfig {
            sigma_fraction: 0.8,
            absolute_sigma: None,
            sample_budget: None,
        }
    }
}

impl CkaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "sigma_fraction must be positive, got {}",
                self.sigma_fraction
            )));
        }
        if let Some(s) = self.absolute_sigma {
            if s <= 0.0 {
                return Err(Error::Config("absolute_sigma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// `CKA = tr(KHLH) / sqrt(tr(KHKH) * tr(LHLH))` with `H = I - (1/n) 11^T`
/// and RBF kernels.
pub fn cka_rbf(x: &FeatureMatrix, y: &FeatureMatrix, cfg: &CkaConfig) -> Result<f64> {
    cfg.validate()?;
    let n = x.len().min(cfg.sample_budget.unwrap_or(usize::MAX));
    if y.len().min(cfg.sample_budget.unwrap_or(usize::MAX)) != n {
        return Err(Error::dimension(
            "cka_rbf",
            format!("row counts differ: {} vs {}", x.len(), y.len()),
        ));
    }
    if n < 3 {
        return Err(Error::dimension("cka_rbf", "need at least 3 examples"));
    }
    let kx = rbf_kernel(&x.rows[..n], cfg, "X")?;
    let ky = rbf_kernel(&y.rows[..n], cfg, "Y")?;
    let kc = center(&kx, n);
    let lc = center(&ky, n);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let num = dot(&kc, &lc);
    let den = (dot(&kc, &kc) * dot(&lc, &lc)).sqrt();
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::numeric(
            "cka_rbf",
            "degenerate input: centered kernel has zero norm",
        ));
    }
    Ok(num / den)
}

fn rbf_kernel(rows: &[Vec<f64>], cfg: &CkaConfig, side: &str) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut dist2 = vec![0.0f64; n * n];
    for_each_chunk(&mut dist2, n, |i, row| {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (&a, &b) in rows[i].iter().zip(&rows[j]) {
                let d = a - b;
                acc += d * d;
            }
            *cell = acc;
        }
    });
    let sigma = match cfg.absolute_sigma {
        Some(s) => s,
        None => {
            let mut pair_dists: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in (i + 1)..n {
                    pair_dists.push(dist2[i * n + j].sqrt());
                }
            }
            pair_dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            let median = if pair_dists.len() % 2 == 1 {
                pair_dists[pair_dists.len() / 2]
            } else {
                0.5 * (pair_dists[pair_dists.len() / 2 - 1] + pair_dists[pair_dists.len() / 2])
            };
            if median <= 0.0 {
                return Err(Error::numeric(
                    "cka_rbf",
                    format!("median pairwise distance of {side} is zero (all rows identical)"),
                ));
            }
            cfg.sigma_fraction * median
        }
    };
    let denom = 2.0 * sigma * sigma;
    Ok(dist2.into_iter().map(|d2| (-d2 / denom).exp()).collect())
}

/// `HKH` for symmetric `K`: subtract row and column means, add back the
/// grand mean.
fn center(k: &[f64], n: usize) -> Vec<f64> {
    let mut row_mean = vec![0.0; n];
    for i in 0..n {
        row_mean[i] = k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64;
    }
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - row_mean[i] - row_mean[j] + grand;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_features(n: usize, d: usize, seed: u64) -> FeatureMatrix {
        let mut rng = crate::rng::derive_rng(seed, &[0xcc]);
        FeatureMatrix {
            rows: (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        }
    }

    /// Brute-force oracle: explicit H matrix products.
    fn cka_oracle(x: &FeatureMatrix, y: &FeatureMatrix, frac: f64) -> f64 {
        let n = x.len();
        let kernel = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
            let mut dists = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    let d: f64 = rows[i]
                        .iter()
                        .zip(&rows[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    dists.push(d);
                }
            }
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = if dists.len() % 2 == 1 {
                dists[dists.len() / 2]
            } else {
                0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
            };
            let sigma = frac * median;
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let d2: f64 = rows[i]
                                .iter()
                                .zip(&rows[j])
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            (-d2 / (2.0 * sigma * sigma)).exp()
                        })
                        .collect()
                })
                .collect()
        };
        let matmul = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| (0..n).map(|p| a[i][p] * b[p][j]).sum())
                        .collect()
                })
                .collect()
        };
        let trace = |a: &[Vec<f64>]| (0..n).map(|i| a[i][i]).sum::<f64>();
        let h: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { 1.0 - 1.0 / n as f64 } else { -1.0 / n as f64 })
                    .collect()
            })
            .collect();
        let k = kernel(&x.rows);
        let l = kernel(&y.rows);
        let khk = matmul(&matmul(&k, &h), &matmul(&l, &h));
        let kk = matmul(&matmul(&k, &h), &matmul(&k, &h));
        let ll = matmul(&matmul(&l, &h), &matmul(&l, &h));
        trace(&khk) / (trace(&kk) * trace(&ll)).sqrt()
    }

    #[test]
    fn self_similarity_is_one() {
        let x = random_features(10, 4, 1);
        let v = cka_rbf(&x, &x, &CkaConfig::default()).unwrap();
        assert!((v - 1.0).abs() <= 1e-8, "CKA(X,X) = {v}");
    }

    #[test]
    fn orthogonal_transform_and_scaling_invariance() {
        let x = random_features(12, 2, 2);
        // rotation by 37 degrees
        let t = 37f64.to_radians();
        let rotated = FeatureMatrix {
            rows: x
                .rows
                .iter()
                .map(|r| {
                    vec![
                        r[0] * t.cos() - r[1] * t.sin(),
                        r[0] * t.sin() + r[1] * t.cos(),
                    ]
                })
                .collect(),
        };
        let scaled = FeatureMatrix {
            rows: x.rows.iter().map(|r| r.iter().map(|v| 3.7 * v).collect()).collect(),
        };
        let cfg = CkaConfig::default();
        let v_rot = cka_rbf(&x, &rotated, &cfg).unwrap();
        let v_scale = cka_rbf(&x, &scaled, &cfg).unwrap();
        assert!((v_rot - 1.0).abs() <= 1e-6, "rotation: {v_rot}");
        assert!((v_scale - 1.0).abs() <= 1e-6, "scaling: {v_scale}");
    }

    #[test]
    fn matches_brute_force_oracle() {
        for seed in 0..5 {
            let x = random_features(6, 3, 100 + seed);
            let y = random_features(6, 3, 200 + seed);
            let got = cka_rbf(&x, &y, &CkaConfig::default()).unwrap();
            let want = cka_oracle(&x, &y, 0.8);
            assert!((got - want).abs() <= 1e-10, "got {got}, want {want}");
        }
    }

    #[test]
    fn symmetric_and_bounded() {
        let x = random_features(8, 5, 7);
        let y = random_features(8, 5, 8);
        let cfg = CkaConfig::default();
        let ab = cka_rbf(&x, &y, &cfg).unwrap();
        let ba = cka_rbf(&y, &x, &cfg).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((-1e-9..=1.0 + 1e-9).contains(&ab));
    }

    #[test]
    fn row_permutation_invariance() {
        let x = random_features(9, 4, 9);
        let y = random_features(9, 4, 10);
        let perm = [3, 1, 4, 0, 8, 6, 2, 7, 5];
        let permute = |m: &FeatureMatrix| FeatureMatrix {
            rows: perm.iter().map(|&i| m.rows[i].clone()).collect(),
        };
        let cfg = CkaConfig::default();
        let base = cka_rbf(&x, &y, &cfg).unwrap();
        let permuted = cka_rbf(&permute(&x), &permute(&y), &cfg).unwrap();
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let x = FeatureMatrix {
            rows: vec![vec![1.0, 2.0]; 5],
        };
        let err = cka_rbf(&x, &x, &CkaConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn too_few_rows_rejected() {
        let x = random_features(2, 3, 11);
        assert!(cka_rbf(&x, &x, &CkaConfig::default()).is_err());
    }
}
