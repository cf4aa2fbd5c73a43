//! Intermediate-tap MSE and the scaled combination with the contrastive
//! loss over a block mask.

use crate::error::{Error, Result};
use crate::loss::BlockMask;
use crate::tensor::{Graph, Scalar, Var};

/// Per masked block: adaptive-average-pool both taps to the configured size,
/// then take the mean over all elements of the squared difference. Returns
/// one scalar Var per block (`None` outside the mask) plus their sum.
pub fn intermediate_mse_loss<T: Scalar>(
    g: &mut Graph<T>,
    taps_a: &[Var],
    taps_b: &[Var],
    pool_sizes: &[(usize, usize)],
    mask: &BlockMask,
) -> Result<(Vec<Option<Var>>, Var)> {
    if taps_a.len() != taps_b.len() || taps_a.len() != pool_sizes.len() {
        return Err(Error::dimension(
            "intermediate_mse_loss",
            format!(
                "taps_a {}, taps_b {}, pool_sizes {} must agree",
                taps_a.len(),
                taps_b.len(),
                pool_sizes.len()
            ),
        ));
    }
    mask.validate(taps_a.len())?;
    let mut per_block = vec![None; taps_a.len()];
    let mut total: Option<Var> = None;
    for block in mask.iter() {
        let i = block - 1;
        let (a, b) = (taps_a[i], taps_b[i]);
        if g.value(a).shape() != g.value(b).shape() {
            return Err(Error::dimension(
                "intermediate_mse_loss",
                format!(
                    "block {block} taps differ in shape: {:?} vs {:?}",
                    g.value(a).shape(),
                    g.value(b).shape()
                ),
            ));
        }
        let (ph, pw) = pool_sizes[i];
        let pa = g.adaptive_avg_pool2d(a, ph, pw)?;
        let pb = g.adaptive_avg_pool2d(b, ph, pw)?;
        let diff = g.sub(pa, pb)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean_all(sq)?;
        per_block[i] = Some(mse);
        total = Some(match total {
            Some(t) => g.add(t, mse)?,
            None => mse,
        });
    }
    let total = total.expect("mask validated nonempty");
    Ok((per_block, total))
}

/// `contrastive + scale * sum over masked blocks`. With `scale == 0` the
/// contrastive Var is returned unchanged, so the baseline path is
/// bit-identical by construction.
pub fn combined_loss<T: Scalar>(
    g: &mut Graph<T>,
    contrastive: Var,
    per_block: &[Option<Var>],
    scale: f64,
    mask: &BlockMask,
) -> Result<Var> {
    if scale < 0.0 {
        return Err(Error::Config(format!("scale must be >= 0, got {scale}")));
    }
    mask.validate(per_block.len())?;
    if scale == 0.0 {
        return Ok(contrastive);
    }
    let mut sum: Option<Var> = None;
    for block in mask.iter() {
        let v = per_block[block - 1].ok_or_else(|| {
            Error::Config(format!("mask references block {block} with no intermediate loss"))
        })?;
        sum = Some(match sum {
            Some(s) => g.add(s, v)?,
            None => v,
        });
    }
    match sum {
        Some(s) => {
            let scaled = g.scale(s, scale)?;
            g.add(contrastive, scaled)
        }
        None => Ok(contrastive),
    }
}
