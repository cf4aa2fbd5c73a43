//! Raw numeric kernels behind the graph ops.
//!
//! Each kernel is written as a per-chunk function plus a driver. The `seq`
//! driver walks chunks in order; the `par` driver (feature `parallel`) hands
//! the same chunks to rayon. Every reduction happens inside a chunk in a
//! fixed order, so both drivers produce bit-identical output — parallelism
//! only ever spans disjoint output regions.

use crate::tensor::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f(chunk_index, chunk)` over disjoint chunks of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Collect `f(0..n)` into a vector; `f` must not depend on evaluation order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Conv2d geometry shared by the forward and backward kernels.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c_out: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

#[inline(always)]
fn matmul_nn_row<T: Scalar>(a_row: &[T], b: &[T], k: usize, n: usize, out_row: &mut [T]) {
    for v in out_row.iter_mut() {
        *v = T::ZERO;
    }
    for p in 0..k {
        let a_pv = a_row[p];
        let b_row = &b[p * n..p * n + n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a_pv * bv;
        }
    }
}

#[inline(always)]
fn matmul_nt_row<T: Scalar>(a_row: &[T], b: &[T], k: usize, out_row: &mut [T]) {
    for (j, o) in out_row.iter_mut().enumerate() {
        let b_row = &b[j * k..j * k + k];
        let mut acc = T::ZERO;
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc += av * bv;
        }
        *o = acc;
    }
}

#[inline(always)]
fn matmul_tn_row<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, p: usize, out_row: &mut [T]) {
    for v in out_row.iter_mut() {
        *v = T::ZERO;
    }
    for i in 0..m {
        let a_ip = a[i * k + p];
        let b_row = &b[i * n..i * n + n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a_ip * bv;
        }
    }
}

/// Output positions `o` (of `count`) whose input coordinate
/// `o*stride + k - pad` lands inside `[0, extent)`.
#[inline(always)]
fn valid_out_range(count: usize, extent: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    if extent + pad <= k {
        return (0, 0);
    }
    let hi = ((extent - 1 + pad - k) / stride + 1).min(count);
    (lo.min(hi), hi)
}

#[inline(always)]
fn conv2d_fwd_plane<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: &[T],
    d: Conv2dDims,
    b: usize,
    co: usize,
    out_plane: &mut [T],
) {
    let in_img = &input[b * d.c_in * d.in_h * d.in_w..];
    let w_f = &weight[co * d.c_in * d.k_h * d.k_w..];
    let bias_v = bias[co];
    for v in out_plane.iter_mut() {
        *v = bias_v;
    }
    for ci in 0..d.c_in {
        let in_ch = &in_img[ci * d.in_h * d.in_w..];
        let w_ch = &w_f[ci * d.k_h * d.k_w..];
        for ky in 0..d.k_h {
            let (oh_lo, oh_hi) = valid_out_range(d.out_h, d.in_h, d.stride, d.pad, ky);
            let w_row = &w_ch[ky * d.k_w..ky * d.k_w + d.k_w];
            for oh in oh_lo..oh_hi {
                let ih = oh * d.stride + ky - d.pad;
                let in_row = &in_ch[ih * d.in_w..ih * d.in_w + d.in_w];
                let out_row = &mut out_plane[oh * d.out_w..(oh + 1) * d.out_w];
                for (kx, &w_v) in w_row.iter().enumerate() {
                    let (ow_lo, ow_hi) = valid_out_range(d.out_w, d.in_w, d.stride, d.pad, kx);
                    if d.stride == 1 {
                        let base = ow_lo + kx - d.pad;
                        for (o, &iv) in out_row[ow_lo..ow_hi]
                            .iter_mut()
                            .zip(&in_row[base..base + (ow_hi - ow_lo)])
                        {
                            *o += w_v * iv;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            out_row[ow] += w_v * in_row[ow * d.stride + kx - d.pad];
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn conv2d_back_input_plane<T: Scalar>(
    grad_out: &[T],
    weight: &[T],
    d: Conv2dDims,
    b: usize,
    ci: usize,
    grad_plane: &mut [T],
) {
    let g_img = &grad_out[b * d.c_out * d.out_h * d.out_w..];
    for v in grad_plane.iter_mut() {
        *v = T::ZERO;
    }
    for co in 0..d.c_out {
        let g_ch = &g_img[co * d.out_h * d.out_w..];
        let w_ch = &weight[(co * d.c_in + ci) * d.k_h * d.k_w..];
        for ky in 0..d.k_h {
            let (oh_lo, oh_hi) = valid_out_range(d.out_h, d.in_h, d.stride, d.pad, ky);
            let w_row = &w_ch[ky * d.k_w..ky * d.k_w + d.k_w];
            for oh in oh_lo..oh_hi {
                let ih = oh * d.stride + ky - d.pad;
                let g_row = &g_ch[oh * d.out_w..(oh + 1) * d.out_w];
                let din_row = &mut grad_plane[ih * d.in_w..(ih + 1) * d.in_w];
                for (kx, &w_v) in w_row.iter().enumerate() {
                    let (ow_lo, ow_hi) = valid_out_range(d.out_w, d.in_w, d.stride, d.pad, kx);
                    if d.stride == 1 {
                        let base = ow_lo + kx - d.pad;
                        for (&g, dv) in g_row[ow_lo..ow_hi]
                            .iter()
                            .zip(&mut din_row[base..base + (ow_hi - ow_lo)])
                        {
                            *dv += w_v * g;
                        }
                    } else {
                        for ow in ow_lo..ow_hi {
                            din_row[ow * d.stride + kx - d.pad] += w_v * g_row[ow];
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
fn conv2d_back_weight_filter<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    d: Conv2dDims,
    co: usize,
    grad_filter: &mut [T],
) {
    for ci in 0..d.c_in {
        for ky in 0..d.k_h {
            let (oh_lo, oh_hi) = valid_out_range(d.out_h, d.in_h, d.stride, d.pad, ky);
            for kx in 0..d.k_w {
                let (ow_lo, ow_hi) = valid_out_range(d.out_w, d.in_w, d.stride, d.pad, kx);
                let mut acc = T::ZERO;
                for b in 0..d.batch {
                    let g_ch = &grad_out[(b * d.c_out + co) * d.out_h * d.out_w..];
                    let in_ch = &input[(b * d.c_in + ci) * d.in_h * d.in_w..];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + ky - d.pad;
                        let in_row = &in_ch[ih * d.in_w..];
                        let g_row = &g_ch[oh * d.out_w..];
                        if d.stride == 1 {
                            let base = ow_lo + kx - d.pad;
                            let mut dot = T::ZERO;
                            for (&g, &iv) in g_row[ow_lo..ow_hi]
                                .iter()
                                .zip(&in_row[base..base + (ow_hi - ow_lo)])
                            {
                                dot += g * iv;
                            }
                            acc += dot;
                        } else {
                            for ow in ow_lo..ow_hi {
                                acc += g_row[ow] * in_row[ow * d.stride + kx - d.pad];
                            }
                        }
                    }
                }
                grad_filter[(ci * d.k_h + ky) * d.k_w + kx] = acc;
            }
        }
    }
}

macro_rules! kernel_drivers {
    () => {
        pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
            let mut out = vec![T::ZERO; m * n];
            drive(&mut out, n, |i, row| {
                super::matmul_nn_row(&a[i * k..i * k + k], b, k, n, row)
            });
            out
        }

        /// `a (m x k) @ b^T (k x n)` where `b` is stored `n x k`.
        pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
            let mut out = vec![T::ZERO; m * n];
            drive(&mut out, n, |i, row| {
                super::matmul_nt_row(&a[i * k..i * k + k], b, k, row)
            });
            out
        }

        /// `a^T (k x m) @ b (m x n)` where `a` is stored `m x k`.
        pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
            let mut out = vec![T::ZERO; k * n];
            drive(&mut out, n, |p, row| super::matmul_tn_row(a, b, m, k, n, p, row));
            out
        }

        pub fn conv2d_fwd<T: Scalar>(
            input: &[T],
            weight: &[T],
            bias: &[T],
            d: super::Conv2dDims,
        ) -> Vec<T> {
            let mut out = vec![T::ZERO; d.batch * d.c_out * d.out_h * d.out_w];
            drive(&mut out, d.out_h * d.out_w, |i, plane| {
                super::conv2d_fwd_plane(input, weight, bias, d, i / d.c_out, i % d.c_out, plane)
            });
            out
        }

        pub fn conv2d_back_input<T: Scalar>(
            grad_out: &[T],
            weight: &[T],
            d: super::Conv2dDims,
        ) -> Vec<T> {
            let mut out = vec![T::ZERO; d.batch * d.c_in * d.in_h * d.in_w];
            drive(&mut out, d.in_h * d.in_w, |i, plane| {
                super::conv2d_back_input_plane(grad_out, weight, d, i / d.c_in, i % d.c_in, plane)
            });
            out
        }

        pub fn conv2d_back_weight<T: Scalar>(
            grad_out: &[T],
            input: &[T],
            d: super::Conv2dDims,
        ) -> Vec<T> {
            let mut out = vec![T::ZERO; d.c_out * d.c_in * d.k_h * d.k_w];
            drive(&mut out, d.c_in * d.k_h * d.k_w, |co, filter| {
                super::conv2d_back_weight_filter(grad_out, input, d, co, filter)
            });
            out
        }

        pub fn conv2d_back_bias<T: Scalar>(grad_out: &[T], d: super::Conv2dDims) -> Vec<T> {
            let mut out = vec![T::ZERO; d.c_out];
            drive(&mut out, 1, |co, cell| {
                let mut acc = T::ZERO;
                for b in 0..d.batch {
                    let plane = &grad_out[(b * d.c_out + co) * d.out_h * d.out_w..];
                    for i in 0..d.out_h * d.out_w {
                        acc += plane[i];
                    }
                }
                cell[0] = acc;
            });
            out
        }
    };
}

pub mod seq {
    use crate::tensor::Scalar;

    fn drive<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    kernel_drivers!();
}

#[cfg(feature = "parallel")]
pub mod par {
    use crate::tensor::Scalar;
    use rayon::prelude::*;

    fn drive<T, F>(data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    kernel_drivers!();
}

#[cfg(feature = "parallel")]
pub use par::*;
#[cfg(not(feature = "parallel"))]
pub use seq::*;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_nn_matches_triple_loop() {
        let mut rng = crate::rng::derive_rng(11, &[1]);
        let (m, k, n) = (4, 5, 3);
        let a = rand_vec(m * k, &mut rng);
        let b = rand_vec(k * n, &mut rng);
        let got = seq::matmul_nn(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a[i * k + p] * b[p * n + j];
                }
                assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nt_and_tn_match_explicit_transposes() {
        let mut rng = crate::rng::derive_rng(12, &[2]);
        let (m, k, n) = (3, 4, 5);
        let a = rand_vec(m * k, &mut rng);
        let b_nk = rand_vec(n * k, &mut rng);
        let got = seq::matmul_nt(&a, &b_nk, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0;
                for p in 0..k {
                    want += a[i * k + p] * b_nk[j * k + p];
                }
                assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
        let b_mn = rand_vec(m * n, &mut rng);
        let got = seq::matmul_tn(&a, &b_mn, m, k, n);
        for p in 0..k {
            for j in 0..n {
                let mut want = 0.0;
                for i in 0..m {
                    want += a[i * k + p] * b_mn[i * n + j];
                }
                assert!((got[p * n + j] - want).abs() < 1e-12);
            }
        }
    }

    /// Naive reference conv kernels, straight from the definition.
    mod naive {
        use super::Conv2dDims;

        pub fn fwd(input: &[f64], weight: &[f64], bias: &[f64], d: Conv2dDims) -> Vec<f64> {
            let mut out = vec![0.0; d.batch * d.c_out * d.out_h * d.out_w];
            for b in 0..d.batch {
                for co in 0..d.c_out {
                    for oh in 0..d.out_h {
                        for ow in 0..d.out_w {
                            let mut acc = bias[co];
                            for ci in 0..d.c_in {
                                for ky in 0..d.k_h {
                                    for kx in 0..d.k_w {
                                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                                        let iw = (ow * d.stride + kx) as isize - d.pad as isize;
                                        if ih < 0 || iw < 0 || ih >= d.in_h as isize || iw >= d.in_w as isize {
                                            continue;
                                        }
                                        acc += input
                                            [((b * d.c_in + ci) * d.in_h + ih as usize) * d.in_w + iw as usize]
                                            * weight[((co * d.c_in + ci) * d.k_h + ky) * d.k_w + kx];
                                    }
                                }
                            }
                            out[((b * d.c_out + co) * d.out_h + oh) * d.out_w + ow] = acc;
                        }
                    }
                }
            }
            out
        }

        pub fn back_input(gout: &[f64], weight: &[f64], d: Conv2dDims) -> Vec<f64> {
            let mut out = vec![0.0; d.batch * d.c_in * d.in_h * d.in_w];
            for b in 0..d.batch {
                for co in 0..d.c_out {
                    for oh in 0..d.out_h {
                        for ow in 0..d.out_w {
                            let g = gout[((b * d.c_out + co) * d.out_h + oh) * d.out_w + ow];
                            for ci in 0..d.c_in {
                                for ky in 0..d.k_h {
                                    for kx in 0..d.k_w {
                                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                                        let iw = (ow * d.stride + kx) as isize - d.pad as isize;
                                        if ih < 0 || iw < 0 || ih >= d.in_h as isize || iw >= d.in_w as isize {
                                            continue;
                                        }
                                        out[((b * d.c_in + ci) * d.in_h + ih as usize) * d.in_w + iw as usize] +=
                                            g * weight[((co * d.c_in + ci) * d.k_h + ky) * d.k_w + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        }

        pub fn back_weight(gout: &[f64], input: &[f64], d: Conv2dDims) -> Vec<f64> {
            let mut out = vec![0.0; d.c_out * d.c_in * d.k_h * d.k_w];
            for b in 0..d.batch {
                for co in 0..d.c_out {
                    for oh in 0..d.out_h {
                        for ow in 0..d.out_w {
                            let g = gout[((b * d.c_out + co) * d.out_h + oh) * d.out_w + ow];
                            for ci in 0..d.c_in {
                                for ky in 0..d.k_h {
                                    for kx in 0..d.k_w {
                                        let ih = (oh * d.stride + ky) as isize - d.pad as isize;
                                        let iw = (ow * d.stride + kx) as isize - d.pad as isize;
                                        if ih < 0 || iw < 0 || ih >= d.in_h as isize || iw >= d.in_w as isize {
                                            continue;
                                        }
                                        out[((co * d.c_in + ci) * d.k_h + ky) * d.k_w + kx] += g
                                            * input[((b * d.c_in + ci) * d.in_h + ih as usize) * d.in_w
                                                + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        }
    }

    #[test]
    fn conv_kernels_match_naive_reference_across_geometries() {
        let mut rng = crate::rng::derive_rng(14, &[4]);
        use rand::Rng;
        for case in 0..24 {
            let stride = 1 + case % 3;
            let pad = case % 3;
            let (k_h, k_w) = (1 + case % 3, 1 + (case / 3) % 3);
            let (in_h, in_w) = (rng.gen_range(4..9), rng.gen_range(4..9));
            if k_h > in_h + 2 * pad || k_w > in_w + 2 * pad {
                continue;
            }
            let d = Conv2dDims {
                batch: rng.gen_range(1..3),
                c_in: rng.gen_range(1..4),
                in_h,
                in_w,
                c_out: rng.gen_range(1..4),
                k_h,
                k_w,
                stride,
                pad,
                out_h: (in_h + 2 * pad - k_h) / stride + 1,
                out_w: (in_w + 2 * pad - k_w) / stride + 1,
            };
            let input = rand_vec(d.batch * d.c_in * d.in_h * d.in_w, &mut rng);
            let weight = rand_vec(d.c_out * d.c_in * d.k_h * d.k_w, &mut rng);
            let bias = rand_vec(d.c_out, &mut rng);
            let gout = rand_vec(d.batch * d.c_out * d.out_h * d.out_w, &mut rng);

            let cases: Vec<(Vec<f64>, Vec<f64>, &str)> = vec![
                (seq::conv2d_fwd(&input, &weight, &bias, d), naive::fwd(&input, &weight, &bias, d), "fwd"),
                (seq::conv2d_back_input(&gout, &weight, d), naive::back_input(&gout, &weight, d), "back_input"),
                (seq::conv2d_back_weight(&gout, &input, d), naive::back_weight(&gout, &input, d), "back_weight"),
            ];
            for (got, want, tag) in cases {
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12, "{tag} mismatch for {d:?}");
                }
            }
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_kernels_bit_identical_to_seq() {
        let mut rng = crate::rng::derive_rng(13, &[3]);
        let d = Conv2dDims {
            batch: 2,
            c_in: 3,
            in_h: 7,
            in_w: 6,
            c_out: 4,
            k_h: 3,
            k_w: 3,
            stride: 2,
            pad: 1,
            out_h: 4,
            out_w: 3,
        };
        let input = rand_vec(d.batch * d.c_in * d.in_h * d.in_w, &mut rng);
        let weight = rand_vec(d.c_out * d.c_in * d.k_h * d.k_w, &mut rng);
        let bias = rand_vec(d.c_out, &mut rng);
        let grad_out = rand_vec(d.batch * d.c_out * d.out_h * d.out_w, &mut rng);

        let pairs: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (
                seq::conv2d_fwd(&input, &weight, &bias, d),
                par::conv2d_fwd(&input, &weight, &bias, d),
            ),
            (
                seq::conv2d_back_input(&grad_out, &weight, d),
                par::conv2d_back_input(&grad_out, &weight, d),
            ),
            (
                seq::conv2d_back_weight(&grad_out, &input, d),
                par::conv2d_back_weight(&grad_out, &input, d),
            ),
            (
                seq::conv2d_back_bias(&grad_out, d),
                par::conv2d_back_bias(&grad_out, d),
            ),
            (
                seq::matmul_nn(&input[..12], &weight[..20], 3, 4, 5),
                par::matmul_nn(&input[..12], &weight[..20], 3, 4, 5),
            ),
        ];
        for (s, p) in pairs {
            assert_eq!(s.len(), p.len());
            for (a, b) in s.iter().zip(&p) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
