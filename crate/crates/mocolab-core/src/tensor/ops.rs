//! Differentiable graph operations.
//!
//! Every op validates shapes, computes its forward value through the shared
//! kernels, checks the result for NaN/Inf, and (when any operand requires
//! grad) records a backward step. Gradient rules are verified against central
//! finite differences in the test suites.

use crate::error::{Error, Result};
use crate::tensor::graph::{accumulate, BackFn, Graph, Var};
use crate::tensor::kernels::{self, Conv2dDims};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(
                op,
                format!(
                    "shape mismatch {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("add")?;
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), out)?;
        out.validate_finite("add")?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let requires = ra || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (aid, bid) = (a.id, b.id);
            let n = out_len(&out);
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if ra {
                    accumulate(grads, aid, n, |s| {
                        for (sv, &g) in s.iter_mut().zip(gout) {
                            *sv += g;
                        }
                    });
                }
                if rb {
                    accumulate(grads, bid, n, |s| {
                        for (sv, &g) in s.iter_mut().zip(gout) {
                            *sv += g;
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("sub")?;
        self.same_shape("sub", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), out)?;
        out.validate_finite("sub")?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let requires = ra || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (aid, bid) = (a.id, b.id);
            let n = out_len(&out);
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if ra {
                    accumulate(grads, aid, n, |s| {
                        for (sv, &g) in s.iter_mut().zip(gout) {
                            *sv += g;
                        }
                    });
                }
                if rb {
                    accumulate(grads, bid, n, |s| {
                        for (sv, &g) in s.iter_mut().zip(gout) {
                            *sv -= g;
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("mul")?;
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape(), out)?;
        out.validate_finite("mul")?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let requires = ra || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (aid, bid) = (a.id, b.id);
            let n = out_len(&out);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if ra {
                    let bd = values[bid].data();
                    accumulate(grads, aid, n, |s| {
                        for ((sv, &g), &bv) in s.iter_mut().zip(gout).zip(bd) {
                            *sv += g * bv;
                        }
                    });
                }
                if rb {
                    let ad = values[aid].data();
                    accumulate(grads, bid, n, |s| {
                        for ((sv, &g), &av) in s.iter_mut().zip(gout).zip(ad) {
                            *sv += g * av;
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Multiply by a compile-time constant factor.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check_open("scale")?;
        let k = T::from_f64(factor);
        let out = self.value(a).map(|v| v * k);
        out.validate_finite("scale")?;
        let requires = self.requires_grad(a);
        let back: Option<BackFn<T>> = requires.then(|| {
            let aid = a.id;
            let n = out_len(&out);
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                accumulate(grads, aid, n, |s| {
                    for (sv, &g) in s.iter_mut().zip(gout) {
                        *sv += g * k;
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_open("sum_all")?;
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let out = Tensor::scalar(acc);
        out.validate_finite("sum_all")?;
        let requires = self.requires_grad(a);
        let back: Option<BackFn<T>> = requires.then(|| {
            let aid = a.id;
            let n = self.value(a).numel();
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let g = gout[0];
                accumulate(grads, aid, n, |s| {
                    for sv in s.iter_mut() {
                        *sv += g;
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.check_open("mean_all")?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::dimension("mean_all", "empty tensor"));
        }
        let inv = T::from_f64(1.0 / n as f64);
        let mut acc = T::ZERO;
        for &v in self.value(a).data() {
            acc += v;
        }
        let out = Tensor::scalar(acc * inv);
        out.validate_finite("mean_all")?;
        let requires = self.requires_grad(a);
        let back: Option<BackFn<T>> = requires.then(|| {
            let aid = a.id;
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let g = gout[0] * inv;
                accumulate(grads, aid, n, |s| {
                    for sv in s.iter_mut() {
                        *sv += g;
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_open("relu")?;
        let out = self.value(a).map(|v| v.maximum(T::ZERO));
        out.validate_finite("relu")?;
        let requires = self.requires_grad(a);
        let back: Option<BackFn<T>> = requires.then(|| {
            let aid = a.id;
            let n = out_len(&out);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let xd = values[aid].data();
                accumulate(grads, aid, n, |s| {
                    for ((sv, &g), &x) in s.iter_mut().zip(gout).zip(xd) {
                        if x > T::ZERO {
                            *sv += g;
                        }
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// `a (m x k) @ b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("matmul")?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dimension(
                "matmul",
                format!("incompatible shapes {sa:?} @ {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        out.validate_finite("matmul")?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let requires = ra || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (aid, bid) = (a.id, b.id);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if ra {
                    let da = kernels::matmul_nt(gout, values[bid].data(), m, n, k);
                    accumulate(grads, aid, m * k, |s| {
                        for (sv, dv) in s.iter_mut().zip(da) {
                            *sv += dv;
                        }
                    });
                }
                if rb {
                    let db = kernels::matmul_tn(values[aid].data(), gout, m, k, n);
                    accumulate(grads, bid, k * n, |s| {
                        for (sv, dv) in s.iter_mut().zip(db) {
                            *sv += dv;
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// `a (m x k) @ b^T` with `b` stored `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("matmul_nt")?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dimension(
                "matmul_nt",
                format!("incompatible shapes {sa:?} @ {sb:?}^T"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        out.validate_finite("matmul_nt")?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let requires = ra || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (aid, bid) = (a.id, b.id);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if ra {
                    // dA = G (m x n) @ B (n x k)
                    let da = kernels::matmul_nn(gout, values[bid].data(), m, n, k);
                    accumulate(grads, aid, m * k, |s| {
                        for (sv, dv) in s.iter_mut().zip(da) {
                            *sv += dv;
                        }
                    });
                }
                if rb {
                    // dB = G^T (n x m) @ A (m x k)
                    let db = kernels::matmul_tn(gout, values[aid].data(), m, n, k);
                    accumulate(grads, bid, n * k, |s| {
                        for (sv, dv) in s.iter_mut().zip(db) {
                            *sv += dv;
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Affine map `x (B x in) @ w^T (in x out) + bias`, `w` stored `out x in`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        self.check_open("linear")?;
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(bias).shape(),
        );
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || sb != [sw[0]] {
            return Err(Error::dimension(
                "linear",
                format!("x {sx:?}, w {sw:?}, bias {sb:?} are incompatible"),
            ));
        }
        let (b, in_f, out_f) = (sx[0], sx[1], sw[0]);
        let mut out = kernels::matmul_nt(self.value(x).data(), self.value(w).data(), b, in_f, out_f);
        let bias_d = self.value(bias).data();
        for row in out.chunks_mut(out_f) {
            for (o, &bv) in row.iter_mut().zip(bias_d) {
                *o += bv;
            }
        }
        let out = Tensor::new(&[b, out_f], out)?;
        out.validate_finite("linear")?;
        let (rx, rw, rb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(bias),
        );
        let requires = rx || rw || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (xid, wid, bid) = (x.id, w.id, bias.id);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if rx {
                    let dx = kernels::matmul_nn(gout, values[wid].data(), b, out_f, in_f);
                    accumulate(grads, xid, b * in_f, |s| {
                        for (sv, dv) in s.iter_mut().zip(dx) {
                            *sv += dv;
                        }
                    });
                }
                if rw {
                    let dw = kernels::matmul_tn(gout, values[xid].data(), b, out_f, in_f);
                    accumulate(grads, wid, out_f * in_f, |s| {
                        for (sv, dv) in s.iter_mut().zip(dw) {
                            *sv += dv;
                        }
                    });
                }
                if rb {
                    accumulate(grads, bid, out_f, |s| {
                        for row in gout.chunks(out_f) {
                            for (sv, &g) in s.iter_mut().zip(row) {
                                *sv += g;
                            }
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// 2-d cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_open("conv2d")?;
        let (sx, sw, sb) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(bias).shape(),
        );
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dimension(
                "conv2d",
                format!("expected 4-d input and weight, got {sx:?} and {sw:?}"),
            ));
        }
        if stride < 1 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (batch, c_in, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, w_cin, k_h, k_w) = (sw[0], sw[1], sw[2], sw[3]);
        if w_cin != c_in {
            return Err(Error::dimension(
                "conv2d",
                format!("weight expects {w_cin} input channels, input has {c_in}"),
            ));
        }
        if sb != [c_out] {
            return Err(Error::dimension(
                "conv2d",
                format!("bias shape {sb:?} does not match {c_out} output channels"),
            ));
        }
        if k_h > in_h + 2 * pad || k_w > in_w + 2 * pad {
            return Err(Error::dimension(
                "conv2d",
                format!("kernel {k_h}x{k_w} exceeds padded input {in_h}x{in_w} (pad {pad})"),
            ));
        }
        let out_h = (in_h + 2 * pad - k_h) / stride + 1;
        let out_w = (in_w + 2 * pad - k_w) / stride + 1;
        let dims = Conv2dDims {
            batch,
            c_in,
            in_h,
            in_w,
            c_out,
            k_h,
            k_w,
            stride,
            pad,
            out_h,
            out_w,
        };
        let out = kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            self.value(bias).data(),
            dims,
        );
        let out = Tensor::new(&[batch, c_out, out_h, out_w], out)?;
        out.validate_finite("conv2d")?;
        let (rx, rw, rb) = (
            self.requires_grad(x),
            self.requires_grad(w),
            self.requires_grad(bias),
        );
        let requires = rx || rw || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (xid, wid, bid) = (x.id, w.id, bias.id);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if rx {
                    let dx = kernels::conv2d_back_input(gout, values[wid].data(), dims);
                    accumulate(grads, xid, dx.len(), |s| {
                        for (sv, dv) in s.iter_mut().zip(dx) {
                            *sv += dv;
                        }
                    });
                }
                if rw {
                    let dw = kernels::conv2d_back_weight(gout, values[xid].data(), dims);
                    accumulate(grads, wid, dw.len(), |s| {
                        for (sv, dv) in s.iter_mut().zip(dw) {
                            *sv += dv;
                        }
                    });
                }
                if rb {
                    let db = kernels::conv2d_back_bias(gout, dims);
                    accumulate(grads, bid, db.len(), |s| {
                        for (sv, dv) in s.iter_mut().zip(db) {
                            *sv += dv;
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Adaptive average pooling with floor/ceil window boundaries:
    /// output cell (i, j) averages input rows
    /// `[floor(i*H/out_h), ceil((i+1)*H/out_h))` and columns analogously.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check_open("adaptive_avg_pool2d")?;
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(Error::dimension(
                "adaptive_avg_pool2d",
                format!("expected 4-d input, got {sx:?}"),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::dimension(
                "adaptive_avg_pool2d",
                "output size must be positive",
            ));
        }
        let (batch, ch, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        if out_h > in_h || out_w > in_w {
            return Err(Error::dimension(
                "adaptive_avg_pool2d",
                format!("upsampling disallowed: {in_h}x{in_w} -> {out_h}x{out_w}"),
            ));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; batch * ch * out_h * out_w];
        for bc in 0..batch * ch {
            let plane = &xd[bc * in_h * in_w..(bc + 1) * in_h * in_w];
            let out_plane = &mut out[bc * out_h * out_w..(bc + 1) * out_h * out_w];
            for oh in 0..out_h {
                let (h0, h1) = pool_window(oh, in_h, out_h);
                for ow in 0..out_w {
                    let (w0, w1) = pool_window(ow, in_w, out_w);
                    let mut acc = T::ZERO;
                    for ih in h0..h1 {
                        for iw in w0..w1 {
                            acc += plane[ih * in_w + iw];
                        }
                    }
                    let count = ((h1 - h0) * (w1 - w0)) as f64;
                    out_plane[oh * out_w + ow] = acc * T::from_f64(1.0 / count);
                }
            }
        }
        let out = Tensor::new(&[batch, ch, out_h, out_w], out)?;
        out.validate_finite("adaptive_avg_pool2d")?;
        let requires = self.requires_grad(x);
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = x.id;
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                accumulate(grads, xid, batch * ch * in_h * in_w, |s| {
                    for bc in 0..batch * ch {
                        let g_plane = &gout[bc * out_h * out_w..(bc + 1) * out_h * out_w];
                        let s_plane = &mut s[bc * in_h * in_w..(bc + 1) * in_h * in_w];
                        for oh in 0..out_h {
                            let (h0, h1) = pool_window(oh, in_h, out_h);
                            for ow in 0..out_w {
                                let (w0, w1) = pool_window(ow, in_w, out_w);
                                let count = ((h1 - h0) * (w1 - w0)) as f64;
                                let g = g_plane[oh * out_w + ow] * T::from_f64(1.0 / count);
                                for ih in h0..h1 {
                                    for iw in w0..w1 {
                                        s_plane[ih * in_w + iw] += g;
                                    }
                                }
                            }
                        }
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Global spatial average: B x C x H x W -> B x C.
    pub fn global_avg_pool2d(&mut self, x: Var) -> Result<Var> {
        self.check_open("global_avg_pool2d")?;
        let sx = self.value(x).shape();
        if sx.len() != 4 {
            return Err(Error::dimension(
                "global_avg_pool2d",
                format!("expected 4-d input, got {sx:?}"),
            ));
        }
        let (batch, ch, in_h, in_w) = (sx[0], sx[1], sx[2], sx[3]);
        let spatial = in_h * in_w;
        let inv = T::from_f64(1.0 / spatial as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; batch * ch];
        for (bc, o) in out.iter_mut().enumerate() {
            let plane = &xd[bc * spatial..(bc + 1) * spatial];
            let mut acc = T::ZERO;
            for &v in plane {
                acc += v;
            }
            *o = acc * inv;
        }
        let out = Tensor::new(&[batch, ch], out)?;
        out.validate_finite("global_avg_pool2d")?;
        let requires = self.requires_grad(x);
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = x.id;
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                accumulate(grads, xid, batch * ch * spatial, |s| {
                    for (bc, &g) in gout.iter().enumerate() {
                        let gv = g * inv;
                        for sv in &mut s[bc * spatial..(bc + 1) * spatial] {
                            *sv += gv;
                        }
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Row-wise L2 normalization of a B x d matrix.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check_open("l2_normalize")?;
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(Error::dimension(
                "l2_normalize",
                format!("expected 2-d input, got {sx:?}"),
            ));
        }
        let (rows, d) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; rows * d];
        let mut inv_norms = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut sq = T::ZERO;
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm.to_f64() <= 1e-12 {
                return Err(Error::numeric(
                    "l2_normalize",
                    format!("row {r} has near-zero norm {}", norm.to_f64()),
                ));
            }
            let inv = T::ONE / norm;
            inv_norms[r] = inv;
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v * inv;
            }
        }
        let out = Tensor::new(&[rows, d], out)?;
        out.validate_finite("l2_normalize")?;
        let requires = self.requires_grad(x);
        let out_id_hint = self.len();
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = x.id;
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let yd = values[out_id_hint].data();
                accumulate(grads, xid, rows * d, |s| {
                    for r in 0..rows {
                        let y = &yd[r * d..(r + 1) * d];
                        let g = &gout[r * d..(r + 1) * d];
                        let mut dot = T::ZERO;
                        for (&gv, &yv) in g.iter().zip(y) {
                            dot += gv * yv;
                        }
                        let inv = inv_norms[r];
                        for ((sv, &gv), &yv) in
                            s[r * d..(r + 1) * d].iter_mut().zip(g).zip(y)
                        {
                            *sv += (gv - yv * dot) * inv;
                        }
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Row-wise softmax of a B x d matrix, computed stably.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_open("softmax")?;
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(Error::dimension("softmax", format!("expected 2-d input, got {sx:?}")));
        }
        let (rows, d) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            softmax_row(row, &mut out[r * d..(r + 1) * d]);
        }
        let out = Tensor::new(&[rows, d], out)?;
        out.validate_finite("softmax")?;
        let requires = self.requires_grad(x);
        let out_id_hint = self.len();
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = x.id;
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let sd = values[out_id_hint].data();
                accumulate(grads, xid, rows * d, |slot| {
                    for r in 0..rows {
                        let s_row = &sd[r * d..(r + 1) * d];
                        let g_row = &gout[r * d..(r + 1) * d];
                        let mut dot = T::ZERO;
                        for (&g, &s) in g_row.iter().zip(s_row) {
                            dot += g * s;
                        }
                        for ((sl, &g), &s) in
                            slot[r * d..(r + 1) * d].iter_mut().zip(g_row).zip(s_row)
                        {
                            *sl += s * (g - dot);
                        }
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Row-wise log-softmax (log-sum-exp stabilized).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_open("log_softmax")?;
        let sx = self.value(x).shape();
        if sx.len() != 2 {
            return Err(Error::dimension(
                "log_softmax",
                format!("expected 2-d input, got {sx:?}"),
            ));
        }
        let (rows, d) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut out = vec![T::ZERO; rows * d];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mut mx = row[0];
            for &v in row {
                mx = mx.maximum(v);
            }
            let mut sum = T::ZERO;
            for &v in row {
                sum += (v - mx).exp();
            }
            let lse = mx + sum.ln();
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let out = Tensor::new(&[rows, d], out)?;
        out.validate_finite("log_softmax")?;
        let requires = self.requires_grad(x);
        let out_id_hint = self.len();
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = x.id;
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let yd = values[out_id_hint].data();
                accumulate(grads, xid, rows * d, |slot| {
                    for r in 0..rows {
                        let y_row = &yd[r * d..(r + 1) * d];
                        let g_row = &gout[r * d..(r + 1) * d];
                        let mut gsum = T::ZERO;
                        for &g in g_row {
                            gsum += g;
                        }
                        for ((sl, &g), &y) in
                            slot[r * d..(r + 1) * d].iter_mut().zip(g_row).zip(y_row)
                        {
                            *sl += g - y.exp() * gsum;
                        }
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Per-row dot product of two B x d matrices -> vector of length B.
    pub fn rowwise_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open("rowwise_dot")?;
        self.same_shape("rowwise_dot", a, b)?;
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(Error::dimension(
                "rowwise_dot",
                format!("expected 2-d inputs, got {sa:?}"),
            ));
        }
        let (rows, d) = (sa[0], sa[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::ZERO; rows];
        for r in 0..rows {
            let mut acc = T::ZERO;
            for i in 0..d {
                acc += ad[r * d + i] * bd[r * d + i];
            }
            out[r] = acc;
        }
        let out = Tensor::new(&[rows], out)?;
        out.validate_finite("rowwise_dot")?;
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let requires = ra || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (aid, bid) = (a.id, b.id);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if ra {
                    let bd = values[bid].data();
                    accumulate(grads, aid, rows * d, |s| {
                        for r in 0..rows {
                            let g = gout[r];
                            for i in 0..d {
                                s[r * d + i] += g * bd[r * d + i];
                            }
                        }
                    });
                }
                if rb {
                    let ad = values[aid].data();
                    accumulate(grads, bid, rows * d, |s| {
                        for r in 0..rows {
                            let g = gout[r];
                            for i in 0..d {
                                s[r * d + i] += g * ad[r * d + i];
                            }
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Prepend a column vector (length B) to a B x K matrix -> B x (K+1).
    pub fn hstack_col(&mut self, col: Var, mat: Var) -> Result<Var> {
        self.check_open("hstack_col")?;
        let (sc, sm) = (self.value(col).shape(), self.value(mat).shape());
        if sc.len() != 1 || sm.len() != 2 || sc[0] != sm[0] {
            return Err(Error::dimension(
                "hstack_col",
                format!("column {sc:?} incompatible with matrix {sm:?}"),
            ));
        }
        let (rows, k) = (sm[0], sm[1]);
        let (cd, md) = (self.value(col).data(), self.value(mat).data());
        let mut out = vec![T::ZERO; rows * (k + 1)];
        for r in 0..rows {
            out[r * (k + 1)] = cd[r];
            out[r * (k + 1) + 1..(r + 1) * (k + 1)].copy_from_slice(&md[r * k..(r + 1) * k]);
        }
        let out = Tensor::new(&[rows, k + 1], out)?;
        out.validate_finite("hstack_col")?;
        let (rc, rm) = (self.requires_grad(col), self.requires_grad(mat));
        let requires = rc || rm;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (cid, mid) = (col.id, mat.id);
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                if rc {
                    accumulate(grads, cid, rows, |s| {
                        for r in 0..rows {
                            s[r] += gout[r * (k + 1)];
                        }
                    });
                }
                if rm {
                    accumulate(grads, mid, rows * k, |s| {
                        for r in 0..rows {
                            for i in 0..k {
                                s[r * k + i] += gout[r * (k + 1) + 1 + i];
                            }
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Column `j` of a B x C matrix -> vector of length B.
    pub fn take_col(&mut self, x: Var, j: usize) -> Result<Var> {
        self.check_open("take_col")?;
        let sx = self.value(x).shape();
        if sx.len() != 2 || j >= sx[1] {
            return Err(Error::dimension(
                "take_col",
                format!("column {j} out of range for shape {sx:?}"),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let out: Vec<T> = (0..rows).map(|r| xd[r * cols + j]).collect();
        let out = Tensor::new(&[rows], out)?;
        let requires = self.requires_grad(x);
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = x.id;
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                accumulate(grads, xid, rows * cols, |s| {
                    for r in 0..rows {
                        s[r * cols + j] += gout[r];
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Batch normalization over the channel axis of a 2-d (B x C) or 4-d
    /// (B x C x H x W) input. Train mode normalizes with batch statistics
    /// and folds them into the running buffers; eval mode reads the buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        training: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        self.check_open("batch_norm")?;
        let sx = self.value(x).shape().to_vec();
        let (batch, ch, spatial) = match sx.len() {
            2 => (sx[0], sx[1], 1),
            4 => (sx[0], sx[1], sx[2] * sx[3]),
            _ => {
                return Err(Error::dimension(
                    "batch_norm",
                    format!("expected 2-d or 4-d input, got {sx:?}"),
                ))
            }
        };
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [ch] {
                return Err(Error::dimension(
                    "batch_norm",
                    format!("{name} shape {:?} does not match {ch} channels", self.value(v).shape()),
                ));
            }
        }
        if running_mean.shape() != [ch] || running_var.shape() != [ch] {
            return Err(Error::dimension(
                "batch_norm",
                "running statistics do not match channel count",
            ));
        }
        if training && batch < 2 {
            return Err(Error::numeric(
                "batch_norm",
                "train mode requires batch size >= 2 (batch variance undefined)",
            ));
        }
        let m = (batch * spatial) as f64;
        let eps_t = T::from_f64(eps);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();

        let mut mean = vec![T::ZERO; ch];
        let mut var = vec![T::ZERO; ch];
        if training {
            for c in 0..ch {
                let mut acc = T::ZERO;
                for b in 0..batch {
                    let base = (b * ch + c) * spatial;
                    for s in 0..spatial {
                        acc += xd[base + s];
                    }
                }
                mean[c] = acc * T::from_f64(1.0 / m);
            }
            for c in 0..ch {
                let mu = mean[c];
                let mut acc = T::ZERO;
                for b in 0..batch {
                    let base = (b * ch + c) * spatial;
                    for s in 0..spatial {
                        let dv = xd[base + s] - mu;
                        acc += dv * dv;
                    }
                }
                var[c] = acc * T::from_f64(1.0 / m);
            }
            // Running buffers track the unbiased batch variance.
            let mom = T::from_f64(momentum);
            let keep = T::from_f64(1.0 - momentum);
            let bessel = T::from_f64(m / (m - 1.0));
            let rm = running_mean.data_mut();
            let rv = running_var.data_mut();
            for c in 0..ch {
                rm[c] = keep * rm[c] + mom * mean[c];
                rv[c] = keep * rv[c] + mom * var[c] * bessel;
            }
        } else {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }

        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::ZERO; xd.len()];
        let mut out = vec![T::ZERO; xd.len()];
        for b in 0..batch {
            for c in 0..ch {
                let base = (b * ch + c) * spatial;
                let (mu, istd, g, be) = (mean[c], inv_std[c], gd[c], bd[c]);
                for s in 0..spatial {
                    let h = (xd[base + s] - mu) * istd;
                    xhat[base + s] = h;
                    out[base + s] = g * h + be;
                }
            }
        }
        let out = Tensor::new(&sx, out)?;
        out.validate_finite("batch_norm")?;
        let (rx, rg, rb) = (
            self.requires_grad(x),
            self.requires_grad(gamma),
            self.requires_grad(beta),
        );
        let requires = rx || rg || rb;
        let back: Option<BackFn<T>> = requires.then(|| {
            let (xid, gid, bid) = (x.id, gamma.id, beta.id);
            let inv_m = T::from_f64(1.0 / m);
            Box::new(move |_values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                // Per-channel reductions of the incoming gradient.
                let mut sum_g = vec![T::ZERO; ch];
                let mut sum_gx = vec![T::ZERO; ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let base = (b * ch + c) * spatial;
                        let mut sg = T::ZERO;
                        let mut sgx = T::ZERO;
                        for s in 0..spatial {
                            sg += gout[base + s];
                            sgx += gout[base + s] * xhat[base + s];
                        }
                        sum_g[c] += sg;
                        sum_gx[c] += sgx;
                    }
                }
                if rb {
                    accumulate(grads, bid, ch, |slot| {
                        for (sl, &v) in slot.iter_mut().zip(&sum_g) {
                            *sl += v;
                        }
                    });
                }
                if rg {
                    accumulate(grads, gid, ch, |slot| {
                        for (sl, &v) in slot.iter_mut().zip(&sum_gx) {
                            *sl += v;
                        }
                    });
                }
                if rx {
                    accumulate(grads, xid, xhat.len(), |slot| {
                        if training {
                            for b in 0..batch {
                                for c in 0..ch {
                                    let base = (b * ch + c) * spatial;
                                    let k = gd[c] * inv_std[c];
                                    let mg = sum_g[c] * inv_m;
                                    let mgx = sum_gx[c] * inv_m;
                                    for s in 0..spatial {
                                        slot[base + s] +=
                                            k * (gout[base + s] - mg - xhat[base + s] * mgx);
                                    }
                                }
                            }
                        } else {
                            for b in 0..batch {
                                for c in 0..ch {
                                    let base = (b * ch + c) * spatial;
                                    let k = gd[c] * inv_std[c];
                                    for s in 0..spatial {
                                        slot[base + s] += k * gout[base + s];
                                    }
                                }
                            }
                        }
                    });
                }
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Mean per-label sigmoid cross-entropy against constant binary targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        self.check_open("bce_with_logits")?;
        if self.value(logits).shape() != targets.shape() {
            return Err(Error::dimension(
                "bce_with_logits",
                format!(
                    "logits {:?} vs targets {:?}",
                    self.value(logits).shape(),
                    targets.shape()
                ),
            ));
        }
        let n = targets.numel();
        if n == 0 {
            return Err(Error::dimension("bce_with_logits", "empty input"));
        }
        let xd = self.value(logits).data();
        let td = targets.data().to_vec();
        let mut acc = T::ZERO;
        for (&x, &t) in xd.iter().zip(&td) {
            // max(x,0) - x*t + ln(1 + exp(-|x|))
            acc += x.maximum(T::ZERO) - x * t + (T::ONE + (-x.abs()).exp()).ln();
        }
        let inv_n = T::from_f64(1.0 / n as f64);
        let out = Tensor::scalar(acc * inv_n);
        out.validate_finite("bce_with_logits")?;
        let requires = self.requires_grad(logits);
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = logits.id;
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let xd = values[xid].data();
                let g = gout[0] * inv_n;
                accumulate(grads, xid, n, |slot| {
                    for ((sl, &x), &t) in slot.iter_mut().zip(xd).zip(&td) {
                        let sig = T::ONE / (T::ONE + (-x).exp());
                        *sl += g * (sig - t);
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }

    /// Test-only escape hatch: a unary op with an arbitrary (possibly wrong)
    /// gradient rule, used as the negative control for the finite-difference
    /// checker.
    #[doc(hidden)]
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: fn(T) -> T,
        backward: fn(T, T) -> T,
    ) -> Result<Var> {
        self.check_open("custom_unary")?;
        let out = self.value(x).map(forward);
        out.validate_finite("custom_unary")?;
        let requires = self.requires_grad(x);
        let back: Option<BackFn<T>> = requires.then(|| {
            let xid = x.id;
            let n = out_len(&out);
            Box::new(move |values: &[Tensor<T>], gout: &[T], grads: &mut [Option<Vec<T>>]| {
                let xd = values[xid].data();
                accumulate(grads, xid, n, |slot| {
                    for ((sl, &g), &x) in slot.iter_mut().zip(gout).zip(xd) {
                        *sl += backward(x, g);
                    }
                });
            }) as BackFn<T>
        });
        Ok(self.push_node(out, requires, back))
    }
}

fn out_len<T: Scalar>(t: &Tensor<T>) -> usize {
    t.numel()
}

/// Floor/ceil pooling window for output index `i` over `input` cells split
/// into `output` windows.
pub fn pool_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut mx = row[0];
    for &v in row {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    let inv = T::ONE / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}
