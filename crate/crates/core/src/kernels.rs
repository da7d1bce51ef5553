//! Per-op loops over canonical (N, C, pixels) data, forward and backward.
//!
//! Sums are carried in f64 regardless of the element type.

use crate::model_ir::{BatchNormAttrs, ConvAttrs, PoolAttrs, TensorMeta};
use crate::scalar::Scalar;

#[inline]
fn f<T: Scalar>(v: T) -> f64 {
    v.to_f64_lossy()
}

#[inline]
fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

/// Batch × channels × pixels view of a canonical tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ncs {
    pub n: usize,
    pub c: usize,
    pub s: usize,
}

impl Ncs {
    pub fn of(meta: &TensorMeta) -> Ncs {
        use crate::model_ir::DimPurpose;
        let mut v = Ncs { n: 1, c: 1, s: 1 };
        for d in &meta.dims {
            match d.tag.purpose {
                DimPurpose::None => v.n *= d.extent,
                DimPurpose::Channel => v.c *= d.extent,
                DimPurpose::Pixel => v.s *= d.extent,
            }
        }
        v
    }
}

/// Canonical 4-d shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Nchw {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Nchw {
    pub fn of(meta: &TensorMeta) -> Nchw {
        let s = meta.canonical_shape();
        assert_eq!(s.len(), 4, "expected a 4-d tensor, got {meta}");
        Nchw {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
        }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

impl Window {
    pub fn of_pool(a: &PoolAttrs) -> Window {
        let s = a.stride();
        Window {
            kh: a.kernel[0],
            kw: a.kernel[1],
            sh: s[0],
            sw: s[1],
            ph: a.padding[0],
            pw: a.padding[1],
        }
    }

    pub fn of_conv(a: &ConvAttrs) -> Window {
        Window {
            kh: a.kernel[0],
            kw: a.kernel[1],
            sh: a.stride[0],
            sw: a.stride[1],
            ph: a.padding[0],
            pw: a.padding[1],
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.ph - self.kh) / self.sh + 1,
            (w + 2 * self.pw - self.kw) / self.sw + 1,
        )
    }

    /// In-bounds input coordinate for output `o` and kernel offset `k`.
    #[inline]
    pub fn src(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let v = (o * stride + k).checked_sub(pad)?;
        (v < extent).then_some(v)
    }
}

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub fn relu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn add<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| t(f(x) + f(y))).collect()
}

/// Direct convolution with groups.
pub fn conv2d<T: Scalar>(
    x: &[T],
    xs: Nchw,
    weight: &[T],
    bias: Option<&[T]>,
    a: &ConvAttrs,
) -> (Vec<T>, Nchw) {
    let win = Window::of_conv(a);
    let (oh, ow) = win.out_hw(xs.h, xs.w);
    let ys = Nchw {
        n: xs.n,
        c: a.out_channels,
        h: oh,
        w: ow,
    };
    let cin_g = xs.c / a.groups;
    let cout_g = a.out_channels / a.groups;
    let mut y = vec![T::zero(); ys.numel()];
    for n in 0..xs.n {
        for o in 0..ys.c {
            let g = o / cout_g;
            let b = bias.map_or(0.0, |b| f(b[o]));
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..win.kh {
                            let Some(iy) = Window::src(oy, ky, win.sh, win.ph, xs.h) else {
                                continue;
                            };
                            for kx in 0..win.kw {
                                let Some(ix) = Window::src(ox, kx, win.sw, win.pw, xs.w) else {
                                    continue;
                                };
                                let wv = weight[((o * cin_g + ci) * win.kh + ky) * win.kw + kx];
                                acc += f(wv) * f(x[xs.at(n, c, iy, ix)]);
                            }
                        }
                    }
                    y[ys.at(n, o, oy, ox)] = t(acc);
                }
            }
        }
    }
    (y, ys)
}

/// Gradients of [`conv2d`]: `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    xs: Nchw,
    weight: &[T],
    dy: &[T],
    a: &ConvAttrs,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let win = Window::of_conv(a);
    let (oh, ow) = win.out_hw(xs.h, xs.w);
    let ys = Nchw {
        n: xs.n,
        c: a.out_channels,
        h: oh,
        w: ow,
    };
    let cin_g = xs.c / a.groups;
    let cout_g = a.out_channels / a.groups;
    let mut dx = vec![0.0f64; xs.numel()];
    let mut dw = vec![0.0f64; weight.len()];
    let mut db = vec![0.0f64; ys.c];
    for n in 0..xs.n {
        for o in 0..ys.c {
            let g = o / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let gy = f(dy[ys.at(n, o, oy, ox)]);
                    db[o] += gy;
                    for ci in 0..cin_g {
                        let c = g * cin_g + ci;
                        for ky in 0..win.kh {
                            let Some(iy) = Window::src(oy, ky, win.sh, win.ph, xs.h) else {
                                continue;
                            };
                            for kx in 0..win.kw {
                                let Some(ix) = Window::src(ox, kx, win.sw, win.pw, xs.w) else {
                                    continue;
                                };
                                let wi = ((o * cin_g + ci) * win.kh + ky) * win.kw + kx;
                                let xi = xs.at(n, c, iy, ix);
                                dx[xi] += f(weight[wi]) * gy;
                                dw[wi] += f(x[xi]) * gy;
                            }
                        }
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(t).collect();
    (cast(dx), cast(dw), cast(db))
}

/// `y[n, o] = b[o] + Σ_i w[o, i] x[n, i]` with `w` stored out × in.
pub fn linear<T: Scalar>(
    x: &[T],
    n: usize,
    inf: usize,
    weight: &[T],
    bias: Option<&[T]>,
    outf: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * outf];
    for b in 0..n {
        for o in 0..outf {
            let mut acc = bias.map_or(0.0, |bv| f(bv[o]));
            for i in 0..inf {
                acc += f(weight[o * inf + i]) * f(x[b * inf + i]);
            }
            y[b * outf + o] = t(acc);
        }
    }
    y
}

/// Gradients of [`linear`]: `(dx, dweight (out × in), dbias)`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    inf: usize,
    weight: &[T],
    dy: &[T],
    outf: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); n * inf];
    for b in 0..n {
        for i in 0..inf {
            let mut acc = 0.0;
            for o in 0..outf {
                acc += f(dy[b * outf + o]) * f(weight[o * inf + i]);
            }
            dx[b * inf + i] = t(acc);
        }
    }
    let mut dw = vec![T::zero(); outf * inf];
    let mut db = vec![T::zero(); outf];
    for o in 0..outf {
        let mut bacc = 0.0;
        for b in 0..n {
            bacc += f(dy[b * outf + o]);
        }
        db[o] = t(bacc);
        for i in 0..inf {
            let mut acc = 0.0;
            for b in 0..n {
                acc += f(dy[b * outf + o]) * f(x[b * inf + i]);
            }
            dw[o * inf + i] = t(acc);
        }
    }
    (dx, dw, db)
}

/// Max pooling seeded with `min_init`. Also returns, per output, the input
/// index that gradient is routed to: the first in-window maximum in scan
/// order, or `None` when the seed wins.
pub fn max_pool<T: Scalar>(x: &[T], xs: Nchw, a: &PoolAttrs) -> (Vec<T>, Vec<Option<usize>>, Nchw) {
    let win = Window::of_pool(a);
    let (oh, ow) = win.out_hw(xs.h, xs.w);
    let ys = Nchw { h: oh, w: ow, ..xs };
    let mut y = vec![T::zero(); ys.numel()];
    let mut arg = vec![None; ys.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = None;
                    for ky in 0..win.kh {
                        let Some(iy) = Window::src(oy, ky, win.sh, win.ph, xs.h) else {
                            continue;
                        };
                        for kx in 0..win.kw {
                            let Some(ix) = Window::src(ox, kx, win.sw, win.pw, xs.w) else {
                                continue;
                            };
                            let i = xs.at(n, c, iy, ix);
                            let v = f(x[i]);
                            if best_i.is_none() || v > best {
                                best = v;
                                best_i = Some(i);
                            }
                        }
                    }
                    let o = ys.at(n, c, oy, ox);
                    if best > a.min_init {
                        y[o] = t(best);
                        arg[o] = best_i;
                    } else {
                        y[o] = t(a.min_init.max(best));
                    }
                }
            }
        }
    }
    (y, arg, ys)
}

pub fn max_pool_backward<T: Scalar>(arg: &[Option<usize>], dy: &[T], x_len: usize) -> Vec<T> {
    let mut dx = vec![0.0f64; x_len];
    for (o, a) in arg.iter().enumerate() {
        if let Some(i) = a {
            dx[*i] += f(dy[o]);
        }
    }
    dx.into_iter().map(t).collect()
}

fn avg_divisor(win: &Window, a: &PoolAttrs, xs: Nchw, oy: usize, ox: usize) -> usize {
    if a.count_padding {
        return win.kh * win.kw;
    }
    let rows = (0..win.kh)
        .filter(|&ky| Window::src(oy, ky, win.sh, win.ph, xs.h).is_some())
        .count();
    let cols = (0..win.kw)
        .filter(|&kx| Window::src(ox, kx, win.sw, win.pw, xs.w).is_some())
        .count();
    rows * cols
}

pub fn avg_pool<T: Scalar>(x: &[T], xs: Nchw, a: &PoolAttrs) -> (Vec<T>, Nchw) {
    let win = Window::of_pool(a);
    let (oh, ow) = win.out_hw(xs.h, xs.w);
    let ys = Nchw { h: oh, w: ow, ..xs };
    let mut y = vec![T::zero(); ys.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..win.kh {
                        let Some(iy) = Window::src(oy, ky, win.sh, win.ph, xs.h) else {
                            continue;
                        };
                        for kx in 0..win.kw {
                            if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, xs.w) {
                                acc += f(x[xs.at(n, c, iy, ix)]);
                            }
                        }
                    }
                    let div = avg_divisor(&win, a, xs, oy, ox) as f64;
                    y[ys.at(n, c, oy, ox)] = t(acc / div);
                }
            }
        }
    }
    (y, ys)
}

pub fn avg_pool_backward<T: Scalar>(dy: &[T], xs: Nchw, a: &PoolAttrs) -> Vec<T> {
    let win = Window::of_pool(a);
    let (oh, ow) = win.out_hw(xs.h, xs.w);
    let ys = Nchw { h: oh, w: ow, ..xs };
    let mut dx = vec![0.0f64; xs.numel()];
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = f(dy[ys.at(n, c, oy, ox)]) / avg_divisor(&win, a, xs, oy, ox) as f64;
                    for ky in 0..win.kh {
                        let Some(iy) = Window::src(oy, ky, win.sh, win.ph, xs.h) else {
                            continue;
                        };
                        for kx in 0..win.kw {
                            if let Some(ix) = Window::src(ox, kx, win.sw, win.pw, xs.w) {
                                dx[xs.at(n, c, iy, ix)] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx.into_iter().map(t).collect()
}

/// Inference-mode batch norm using running statistics.
pub fn batch_norm_infer<T: Scalar>(
    x: &[T],
    v: Ncs,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for n in 0..v.n {
        for c in 0..v.c {
            let inv = 1.0 / (f(var[c]) + eps).sqrt();
            for s in 0..v.s {
                let i = (n * v.c + c) * v.s + s;
                y[i] = t((f(x[i]) - f(mean[c])) * inv * f(gamma[c]) + f(beta[c]));
            }
        }
    }
    y
}

/// Batch statistics: per-channel mean and biased variance.
pub fn channel_stats<T: Scalar>(x: &[T], v: Ncs) -> (Vec<f64>, Vec<f64>) {
    let m = (v.n * v.s) as f64;
    let mut mean = vec![0.0; v.c];
    let mut var = vec![0.0; v.c];
    for c in 0..v.c {
        let mut acc = 0.0;
        for n in 0..v.n {
            for s in 0..v.s {
                acc += f(x[(n * v.c + c) * v.s + s]);
            }
        }
        mean[c] = acc / m;
        let mut sq = 0.0;
        for n in 0..v.n {
            for s in 0..v.s {
                let d = f(x[(n * v.c + c) * v.s + s]) - mean[c];
                sq += d * d;
            }
        }
        var[c] = sq / m;
    }
    (mean, var)
}

/// Training-mode batch norm; returns the output and the batch statistics.
pub fn batch_norm_train<T: Scalar>(
    x: &[T],
    v: Ncs,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<f64>, Vec<f64>) {
    let (mean, var) = channel_stats(x, v);
    let mut y = vec![T::zero(); x.len()];
    for n in 0..v.n {
        for c in 0..v.c {
            let inv = 1.0 / (var[c] + eps).sqrt();
            for s in 0..v.s {
                let i = (n * v.c + c) * v.s + s;
                y[i] = t((f(x[i]) - mean[c]) * inv * f(gamma[c]) + f(beta[c]));
            }
        }
    }
    (y, mean, var)
}

/// Running-statistics update with the unbiased batch variance.
pub fn batch_norm_update_running<T: Scalar>(
    running_mean: &mut [T],
    running_var: &mut [T],
    mean: &[f64],
    var: &[f64],
    count: usize,
    a: &BatchNormAttrs,
) {
    let unbias = if count > 1 {
        count as f64 / (count as f64 - 1.0)
    } else {
        1.0
    };
    for c in 0..mean.len() {
        running_mean[c] = t((1.0 - a.momentum) * f(running_mean[c]) + a.momentum * mean[c]);
        running_var[c] = t((1.0 - a.momentum) * f(running_var[c]) + a.momentum * var[c] * unbias);
    }
}

/// Gradients of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    x: &[T],
    v: Ncs,
    gamma: &[T],
    dy: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (mean, var) = channel_stats(x, v);
    let m = (v.n * v.s) as f64;
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); v.c];
    let mut dbeta = vec![T::zero(); v.c];
    for c in 0..v.c {
        let inv = 1.0 / (var[c] + eps).sqrt();
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for n in 0..v.n {
            for s in 0..v.s {
                let i = (n * v.c + c) * v.s + s;
                let xhat = (f(x[i]) - mean[c]) * inv;
                sum_dy += f(dy[i]);
                sum_dy_xhat += f(dy[i]) * xhat;
            }
        }
        dgamma[c] = t(sum_dy_xhat);
        dbeta[c] = t(sum_dy);
        let g = f(gamma[c]);
        for n in 0..v.n {
            for s in 0..v.s {
                let i = (n * v.c + c) * v.s + s;
                let xhat = (f(x[i]) - mean[c]) * inv;
                dx[i] = t(g * inv / m * (m * f(dy[i]) - sum_dy - xhat * sum_dy_xhat));
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn global_avg_pool<T: Scalar>(x: &[T], v: Ncs) -> Vec<T> {
    let mut y = vec![T::zero(); v.n * v.c];
    for nc in 0..v.n * v.c {
        let acc: f64 = x[nc * v.s..(nc + 1) * v.s].iter().map(|&e| f(e)).sum();
        y[nc] = t(acc / v.s as f64);
    }
    y
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &[T], v: Ncs) -> Vec<T> {
    let mut dx = vec![T::zero(); v.n * v.c * v.s];
    for nc in 0..v.n * v.c {
        let g = t::<T>(f(dy[nc]) / v.s as f64);
        dx[nc * v.s..(nc + 1) * v.s].fill(g);
    }
    dx
}

/// Softmax over the channel dims, independently per batch item and pixel.
pub fn softmax<T: Scalar>(x: &[T], v: Ncs) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for n in 0..v.n {
        for s in 0..v.s {
            let idx = |c: usize| (n * v.c + c) * v.s + s;
            let m = (0..v.c).map(|c| f(x[idx(c)])).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..v.c).map(|c| (f(x[idx(c)]) - m).exp()).sum();
            for c in 0..v.c {
                y[idx(c)] = t((f(x[idx(c)]) - m).exp() / z);
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], v: Ncs) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for n in 0..v.n {
        for s in 0..v.s {
            let idx = |c: usize| (n * v.c + c) * v.s + s;
            let dot: f64 = (0..v.c).map(|c| f(dy[idx(c)]) * f(y[idx(c)])).sum();
            for c in 0..v.c {
                dx[idx(c)] = t(f(y[idx(c)]) * (f(dy[idx(c)]) - dot));
            }
        }
    }
    dx
}

/// Mean cross-entropy of `[N, C]` scores against class labels.
/// `probabilities` selects whether `x` already holds softmax output.
pub fn cross_entropy<T: Scalar>(x: &[T], n: usize, c: usize, labels: &[usize], probabilities: bool) -> f64 {
    let mut total = 0.0;
    for b in 0..n {
        let row = &x[b * c..(b + 1) * c];
        let l = labels[b];
        total += if probabilities {
            -f(row[l]).ln()
        } else {
            let m = row.iter().map(|&v| f(v)).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (f(v) - m).exp()).sum::<f64>().ln();
            lse - f(row[l])
        };
    }
    total / n as f64
}

/// Gradient of the mean cross-entropy with respect to logits: `(softmax − onehot) / N`.
/// Pass `probabilities = true` when `x` already holds the softmax output.
pub fn cross_entropy_logits_backward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    labels: &[usize],
    probabilities: bool,
) -> Vec<T> {
    let p = if probabilities {
        x.to_vec()
    } else {
        softmax(x, Ncs { n, c, s: 1 })
    };
    let mut dx = vec![T::zero(); n * c];
    for b in 0..n {
        for k in 0..c {
            let onehot = if k == labels[b] { 1.0 } else { 0.0 };
            dx[b * c + k] = t((f(p[b * c + k]) - onehot) / n as f64);
        }
    }
    dx
}

/// Gradient of the mean cross-entropy with respect to probabilities.
pub fn cross_entropy_probs_backward<T: Scalar>(p: &[T], n: usize, c: usize, labels: &[usize]) -> Vec<T> {
    let mut dx = vec![T::zero(); n * c];
    for b in 0..n {
        let l = labels[b];
        dx[b * c + l] = t(-1.0 / (n as f64 * f(p[b * c + l])));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_of_iota() {
        let xs = Nchw { n: 1, c: 1, h: 3, w: 3 };
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let (y, ys) = avg_pool(&x, xs, &PoolAttrs::new(3, 1, 0));
        assert_eq!((ys.h, ys.w), (1, 1));
        assert_eq!(y, vec![4.0]);
    }

    #[test]
    fn max_pool_seed_and_routing() {
        let xs = Nchw { n: 1, c: 1, h: 2, w: 2 };
        let x = [-5.0f64, 3.0, 2.0, -1.0];
        let mut a = PoolAttrs::new(2, 2, 0);
        a.min_init = 0.0;
        let (y, arg, _) = max_pool(&x, xs, &a);
        assert_eq!(y, vec![3.0]);
        assert_eq!(arg, vec![Some(1)]);
        let neg = [-5.0f64, -3.0, -2.0, -1.0];
        let (y, arg, _) = max_pool(&neg, xs, &a);
        assert_eq!(y, vec![0.0]);
        assert_eq!(arg, vec![None]);
    }

    #[test]
    fn max_pool_ties_route_to_first() {
        let xs = Nchw { n: 1, c: 1, h: 2, w: 2 };
        let (_, arg, _) = max_pool(&[1.0f64, 2.0, 2.0, 0.0], xs, &PoolAttrs::new(2, 2, 0));
        assert_eq!(arg, vec![Some(1)]);
    }

    #[test]
    fn cross_entropy_matches_softmax_path() {
        let x = [1.0f64, 2.0, 0.5, -1.0, 0.0, 3.0];
        let labels = [1, 2];
        let p = softmax(&x, Ncs { n: 2, c: 3, s: 1 });
        let a = cross_entropy(&x, 2, 3, &labels, false);
        let b = cross_entropy(&p, 2, 3, &labels, true);
        assert!((a - b).abs() < 1e-12);
    }
}
