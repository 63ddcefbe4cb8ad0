//! Raw forward/backward loops. Shapes are validated by the callers in `tape`.
//!
//! Every reduction walks its operands in a fixed order so results are
//! bitwise reproducible.

use super::Tensor;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims5 {
    pub b: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub fn of(t: &Tensor) -> Self {
        let s = t.shape();
        Self { b: s[0], c: s[1], t: s[2], h: s[3], w: s[4] }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Offset of the `[h, w]` plane at `(b, c, t)`.
    pub fn plane_at(&self, b: usize, c: usize, t: usize) -> usize {
        ((b * self.c + c) * self.t + t) * self.plane()
    }

    pub fn shape(&self) -> Vec<usize> {
        vec![self.b, self.c, self.t, self.h, self.w]
    }
}

/// Valid output range `[lo, hi)` for a kernel tap `k` with padding `pad`
/// along an axis of length `n`; the matching input index is `o + k - pad`.
#[inline]
fn tap_range(n: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (n + pad).saturating_sub(k).min(n);
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, pad: [usize; 2]) -> Tensor {
    let d = Dims5::of(input);
    let ks = kernel.shape();
    let (co_n, kh, kw) = (ks[0], ks[2], ks[3]);
    let od = Dims5 { c: co_n, ..d };
    let mut out = vec![0.0; od.b * od.c * od.t * od.plane()];
    let x = input.data();
    let k = kernel.data();
    for b in 0..d.b {
        for co in 0..co_n {
            for ci in 0..d.c {
                for ky in 0..kh {
                    let (y0, y1) = tap_range(d.h, ky, pad[0]);
                    for kx in 0..kw {
                        let wv = k[((co * d.c + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = tap_range(d.w, kx, pad[1]);
                        for t in 0..d.t {
                            let ob = od.plane_at(b, co, t);
                            let ib = d.plane_at(b, ci, t);
                            for y in y0..y1 {
                                let iy = y + ky - pad[0];
                                let orow = &mut out[ob + y * d.w + x0..ob + y * d.w + x1];
                                let irow = &x[ib + iy * d.w + x0 + kx - pad[1]..];
                                for (o, i) in orow.iter_mut().zip(irow) {
                                    *o += wv * i;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: od.shape(), data: out }
}

pub(crate) fn conv2d_backward_input(grad_out: &Tensor, kernel: &Tensor, in_channels: usize, pad: [usize; 2]) -> Tensor {
    let od = Dims5::of(grad_out);
    let d = Dims5 { c: in_channels, ..od };
    let ks = kernel.shape();
    let (kh, kw) = (ks[2], ks[3]);
    let mut gin = vec![0.0; d.b * d.c * d.t * d.plane()];
    let g = grad_out.data();
    let k = kernel.data();
    for b in 0..d.b {
        for co in 0..od.c {
            for ci in 0..d.c {
                for ky in 0..kh {
                    let (y0, y1) = tap_range(d.h, ky, pad[0]);
                    for kx in 0..kw {
                        let wv = k[((co * d.c + ci) * kh + ky) * kw + kx];
                        let (x0, x1) = tap_range(d.w, kx, pad[1]);
                        for t in 0..d.t {
                            let ob = od.plane_at(b, co, t);
                            let ib = d.plane_at(b, ci, t);
                            for y in y0..y1 {
                                let iy = y + ky - pad[0];
                                let grow = &g[ob + y * d.w + x0..ob + y * d.w + x1];
                                let start = ib + iy * d.w + x0 + kx - pad[1];
                                let irow = &mut gin[start..start + (x1 - x0)];
                                for (i, o) in irow.iter_mut().zip(grow) {
                                    *i += wv * o;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: d.shape(), data: gin }
}

pub(crate) fn conv2d_backward_kernel(
    grad_out: &Tensor,
    input: &Tensor,
    kernel_shape: &[usize],
    pad: [usize; 2],
) -> Tensor {
    let d = Dims5::of(input);
    let od = Dims5::of(grad_out);
    let (kh, kw) = (kernel_shape[2], kernel_shape[3]);
    let mut gk = vec![0.0; kernel_shape.iter().product()];
    let g = grad_out.data();
    let x = input.data();
    for co in 0..od.c {
        for ci in 0..d.c {
            for ky in 0..kh {
                let (y0, y1) = tap_range(d.h, ky, pad[0]);
                for kx in 0..kw {
                    let (x0, x1) = tap_range(d.w, kx, pad[1]);
                    let mut acc = 0.0;
                    for b in 0..d.b {
                        for t in 0..d.t {
                            let ob = od.plane_at(b, co, t);
                            let ib = d.plane_at(b, ci, t);
                            for y in y0..y1 {
                                let iy = y + ky - pad[0];
                                let grow = &g[ob + y * d.w + x0..ob + y * d.w + x1];
                                let irow = &x[ib + iy * d.w + x0 + kx - pad[1]..];
                                for (o, i) in grow.iter().zip(irow) {
                                    acc += o * i;
                                }
                            }
                        }
                    }
                    gk[((co * d.c + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    Tensor { shape: kernel_shape.to_vec(), data: gk }
}

pub(crate) fn conv1d_forward(input: &Tensor, kernel: &Tensor, pad: usize) -> Tensor {
    let d = Dims5::of(input);
    let ks = kernel.shape();
    let (co_n, kt) = (ks[0], ks[2]);
    let od = Dims5 { c: co_n, ..d };
    let p = d.plane();
    let mut out = vec![0.0; od.b * od.c * od.t * p];
    let x = input.data();
    let k = kernel.data();
    for b in 0..d.b {
        for co in 0..co_n {
            for ci in 0..d.c {
                for j in 0..kt {
                    let wv = k[(co * d.c + ci) * kt + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let (t0, t1) = tap_range(d.t, j, pad);
                    for t in t0..t1 {
                        let ob = od.plane_at(b, co, t);
                        let ib = d.plane_at(b, ci, t + j - pad);
                        for (o, i) in out[ob..ob + p].iter_mut().zip(&x[ib..ib + p]) {
                            *o += wv * i;
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: od.shape(), data: out }
}

pub(crate) fn conv1d_backward_input(grad_out: &Tensor, kernel: &Tensor, in_channels: usize, pad: usize) -> Tensor {
    let od = Dims5::of(grad_out);
    let d = Dims5 { c: in_channels, ..od };
    let kt = kernel.shape()[2];
    let p = d.plane();
    let mut gin = vec![0.0; d.b * d.c * d.t * p];
    let g = grad_out.data();
    let k = kernel.data();
    for b in 0..d.b {
        for co in 0..od.c {
            for ci in 0..d.c {
                for j in 0..kt {
                    let wv = k[(co * d.c + ci) * kt + j];
                    let (t0, t1) = tap_range(d.t, j, pad);
                    for t in t0..t1 {
                        let ob = od.plane_at(b, co, t);
                        let ib = d.plane_at(b, ci, t + j - pad);
                        for (i, o) in gin[ib..ib + p].iter_mut().zip(&g[ob..ob + p]) {
                            *i += wv * o;
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: d.shape(), data: gin }
}

pub(crate) fn conv1d_backward_kernel(grad_out: &Tensor, input: &Tensor, kernel_shape: &[usize], pad: usize) -> Tensor {
    let d = Dims5::of(input);
    let od = Dims5::of(grad_out);
    let kt = kernel_shape[2];
    let p = d.plane();
    let mut gk = vec![0.0; kernel_shape.iter().product()];
    let g = grad_out.data();
    let x = input.data();
    for co in 0..od.c {
        for ci in 0..d.c {
            for j in 0..kt {
                let (t0, t1) = tap_range(d.t, j, pad);
                let mut acc = 0.0;
                for b in 0..d.b {
                    for t in t0..t1 {
                        let ob = od.plane_at(b, co, t);
                        let ib = d.plane_at(b, ci, t + j - pad);
                        for (o, i) in g[ob..ob + p].iter().zip(&x[ib..ib + p]) {
                            acc += o * i;
                        }
                    }
                }
                gk[(co * d.c + ci) * kt + j] = acc;
            }
        }
    }
    Tensor { shape: kernel_shape.to_vec(), data: gk }
}

/// Per-channel `(mean, biased variance)` over batch, time and space.
pub(crate) fn channel_moments(input: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = Dims5::of(input);
    let x = input.data();
    let p = d.plane();
    let m = (d.b * d.t * p) as f64;
    let mut mean = vec![0.0; d.c];
    let mut var = vec![0.0; d.c];
    for c in 0..d.c {
        let mut s = 0.0;
        for b in 0..d.b {
            for t in 0..d.t {
                let o = d.plane_at(b, c, t);
                s += x[o..o + p].iter().sum::<f64>();
            }
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..d.b {
            for t in 0..d.t {
                let o = d.plane_at(b, c, t);
                v += x[o..o + p].iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>();
            }
        }
        mean[c] = mu;
        var[c] = v / m;
    }
    (mean, var)
}

/// Applies `(x - mean) * inv_std` per channel.
pub(crate) fn normalize(input: &Tensor, mean: &[f64], inv_std: &[f64]) -> Tensor {
    let d = Dims5::of(input);
    let p = d.plane();
    let mut out = input.clone();
    let y = out.data_mut();
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                let o = d.plane_at(b, c, t);
                for v in &mut y[o..o + p] {
                    *v = (*v - mean[c]) * inv_std[c];
                }
            }
        }
    }
    out
}

/// `gamma[c] * xhat + beta[c]` per channel.
pub(crate) fn affine(xhat: &Tensor, gamma: &[f64], beta: &[f64]) -> Tensor {
    let d = Dims5::of(xhat);
    let p = d.plane();
    let mut out = xhat.clone();
    let y = out.data_mut();
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                let o = d.plane_at(b, c, t);
                for v in &mut y[o..o + p] {
                    *v = gamma[c] * *v + beta[c];
                }
            }
        }
    }
    out
}

/// Per-channel sums of `a` and of `a * b`.
pub(crate) fn channel_sums(a: &Tensor, b_t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = Dims5::of(a);
    let p = d.plane();
    let (x, y) = (a.data(), b_t.data());
    let mut s = vec![0.0; d.c];
    let mut sp = vec![0.0; d.c];
    for c in 0..d.c {
        for b in 0..d.b {
            for t in 0..d.t {
                let o = d.plane_at(b, c, t);
                for i in o..o + p {
                    s[c] += x[i];
                    sp[c] += x[i] * y[i];
                }
            }
        }
    }
    (s, sp)
}

pub(crate) fn avg_pool2_forward(input: &Tensor) -> Tensor {
    let d = Dims5::of(input);
    let od = Dims5 { h: d.h / 2, w: d.w / 2, ..d };
    let x = input.data();
    let mut out = vec![0.0; od.b * od.c * od.t * od.plane()];
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                let ib = d.plane_at(b, c, t);
                let ob = od.plane_at(b, c, t);
                for y in 0..od.h {
                    for xo in 0..od.w {
                        let i = ib + 2 * y * d.w + 2 * xo;
                        out[ob + y * od.w + xo] = 0.25 * (x[i] + x[i + 1] + x[i + d.w] + x[i + d.w + 1]);
                    }
                }
            }
        }
    }
    Tensor { shape: od.shape(), data: out }
}

pub(crate) fn avg_pool2_backward(grad_out: &Tensor, in_shape: &[usize]) -> Tensor {
    let od = Dims5::of(grad_out);
    let d = Dims5 { b: in_shape[0], c: in_shape[1], t: in_shape[2], h: in_shape[3], w: in_shape[4] };
    let g = grad_out.data();
    let mut gin = vec![0.0; d.b * d.c * d.t * d.plane()];
    for b in 0..d.b {
        for c in 0..d.c {
            for t in 0..d.t {
                let ib = d.plane_at(b, c, t);
                let ob = od.plane_at(b, c, t);
                for y in 0..od.h {
                    for xo in 0..od.w {
                        let v = 0.25 * g[ob + y * od.w + xo];
                        let i = ib + 2 * y * d.w + 2 * xo;
                        gin[i] += v;
                        gin[i + 1] += v;
                        gin[i + d.w] += v;
                        gin[i + d.w + 1] += v;
                    }
                }
            }
        }
    }
    Tensor { shape: d.shape(), data: gin }
}

/// Mean over time and space: `[B, C, T, H, W] -> [B, C]` as a flat vector.
pub(crate) fn global_mean(input: &Tensor) -> Vec<f64> {
    let d = Dims5::of(input);
    let n = d.t * d.plane();
    let x = input.data();
    (0..d.b * d.c).map(|bc| x[bc * n..(bc + 1) * n].iter().sum::<f64>() / n as f64).collect()
}

/// `out[b, k] = sum_c head[k, c] * pooled[b, c]`.
pub(crate) fn linear(pooled: &[f64], head: &Tensor, batch: usize) -> Tensor {
    let (k_n, c_n) = (head.shape()[0], head.shape()[1]);
    let w = head.data();
    let mut out = vec![0.0; batch * k_n];
    for b in 0..batch {
        for k in 0..k_n {
            out[b * k_n + k] = (0..c_n).map(|c| w[k * c_n + c] * pooled[b * c_n + c]).sum::<f64>();
        }
    }
    Tensor { shape: vec![batch, k_n], data: out }
}

/// Row-wise log-sum-exp with max subtraction.
pub(crate) fn log_softmax_rows(logits: &Tensor) -> Vec<f64> {
    let (b_n, k_n) = (logits.shape()[0], logits.shape()[1]);
    let z = logits.data();
    let mut out = vec![0.0; b_n * k_n];
    for b in 0..b_n {
        let row = &z[b * k_n..(b + 1) * k_n];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for k in 0..k_n {
            out[b * k_n + k] = row[k] - lse;
        }
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
