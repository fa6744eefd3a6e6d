//! Forward and backward kernels on flat NCHW buffers.
//!
//! Work is split across the batch dimension only. Every per-sample result is
//! computed by the same sequential code, and cross-sample reductions are
//! summed in sample order, so outputs do not depend on the thread count.

use rayon::prelude::*;

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.out_plane();
    let kk = g.patch_len();
    let sample_in = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.c_out * p];
    out.par_chunks_mut(g.c_out * p)
        .enumerate()
        .for_each(|(i, o)| {
            let xi = &x[i * sample_in..(i + 1) * sample_in];
            if g.pointwise() {
                T::gemm(g.c_out, kk, p, weight, false, xi, false, T::zero(), o);
            } else {
                let mut col = vec![T::zero(); kk * p];
                im2col(xi, g, &mut col);
                T::gemm(g.c_out, kk, p, weight, false, &col, false, T::zero(), o);
            }
            for (c, &b) in bias.iter().enumerate() {
                o[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += b);
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let p = g.out_plane();
    let kk = g.patch_len();
    let sample_in = g.c_in * g.h * g.w;
    let sample_out = g.c_out * p;

    let input = need_x.then(|| {
        let mut dx = vec![T::zero(); g.n * sample_in];
        dx.par_chunks_mut(sample_in).enumerate().for_each(|(i, dxi)| {
            let dyi = &dy[i * sample_out..(i + 1) * sample_out];
            if g.pointwise() {
                T::gemm(kk, g.c_out, p, weight, true, dyi, false, T::zero(), dxi);
            } else {
                let mut dcol = vec![T::zero(); kk * p];
                T::gemm(kk, g.c_out, p, weight, true, dyi, false, T::zero(), &mut dcol);
                col2im(&dcol, g, dxi);
            }
        });
        dx
    });

    let weight_grad = need_w.then(|| {
        let partials: Vec<Vec<T>> = (0..g.n)
            .into_par_iter()
            .map(|i| {
                let xi = &x[i * sample_in..(i + 1) * sample_in];
                let dyi = &dy[i * sample_out..(i + 1) * sample_out];
                let mut dw = vec![T::zero(); g.c_out * kk];
                if g.pointwise() {
                    T::gemm(g.c_out, p, kk, dyi, false, xi, true, T::zero(), &mut dw);
                } else {
                    let mut col = vec![T::zero(); kk * p];
                    im2col(xi, g, &mut col);
                    T::gemm(g.c_out, p, kk, dyi, false, &col, true, T::zero(), &mut dw);
                }
                dw
            })
            .collect();
        sum_in_order(partials, g.c_out * kk)
    });

    let bias = need_b.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for i in 0..g.n {
            for (c, acc) in db.iter_mut().enumerate() {
                let start = i * sample_out + c * p;
                *acc += dy[start..start + p].iter().copied().sum::<T>();
            }
        }
        db
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

fn sum_in_order<T: Real>(parts: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        total.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    total
}

/// Max pooling with a square `k x k` window. Returns the output and, for
/// each output element, the flat input index that produced it. Ties go to
/// the first element in row-major window order.
pub fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Real>(dy: &[T], argmax: &[usize], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &idx) in dy.iter().zip(argmax) {
        dx[idx] += g;
    }
    dx
}

/// Source taps for one axis of half-pixel (align-corners = false) bilinear
/// upsampling: `(lo, hi, weight_lo, weight_hi)` per output coordinate.
fn bilinear_taps<T: Real>(len: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    let scale = 1.0 / factor as f64;
    (0..len * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            let frac = src - lo as f64;
            let frac = if lo == hi { 0.0 } else { frac };
            (lo, hi, T::from_f64(1.0 - frac), T::from_f64(frac))
        })
        .collect()
}

pub fn upsample_forward<T: Real>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pl, o)| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                o[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    });
    out
}

pub fn upsample_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let ty = bilinear_taps::<T>(h, factor);
    let tx = bilinear_taps::<T>(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::zero(); planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(pl, d)| {
        let g = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += wy0 * wx0 * v;
                d[y0 * w + x1] += wy0 * wx1 * v;
                d[y1 * w + x0] += wy1 * wx0 * v;
                d[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    });
    dx
}

/// Weighted pixelwise softmax cross-entropy summed over all pixels.
/// `logits` is `n x c x m` (m = pixels per image); `labels` and `weights`
/// are `n x m`. Label ranges must already be validated.
pub fn cross_entropy_forward<T: Real>(
    logits: &[T],
    labels: &[u8],
    weights: &[T],
    n: usize,
    c: usize,
    m: usize,
) -> T {
    let mut total = 0.0f64;
    for i in 0..n {
        let base = i * c * m;
        for k in 0..m {
            let wk = weights[i * m + k];
            if wk == T::zero() {
                continue;
            }
            let at = |j: usize| logits[base + j * m + k].as_f64();
            let max = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..c).map(|j| (at(j) - max).exp()).sum::<f64>().ln();
            total += wk.as_f64() * (lse - at(labels[i * m + k] as usize));
        }
    }
    T::from_f64(total)
}

pub fn cross_entropy_backward<T: Real>(
    logits: &[T],
    labels: &[u8],
    weights: &[T],
    upstream: T,
    c: usize,
    m: usize,
) -> Vec<T> {
    let mut grad = vec![T::zero(); logits.len()];
    grad.par_chunks_mut(c * m).enumerate().for_each(|(i, gi)| {
        let base = i * c * m;
        for k in 0..m {
            let wk = weights[i * m + k];
            if wk == T::zero() {
                continue;
            }
            let at = |j: usize| logits[base + j * m + k];
            let max = (0..c).map(at).fold(T::neg_infinity(), T::max);
            let denom: T = (0..c).map(|j| (at(j) - max).exp()).sum();
            let scale = upstream * wk;
            let label = labels[i * m + k] as usize;
            for j in 0..c {
                let p = (at(j) - max).exp() / denom;
                let target = if j == label { T::one() } else { T::zero() };
                gi[j * m + k] = scale * (p - target);
            }
        }
    });
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize, c_in: usize, h: usize, w: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Direct seven-loop convolution used as a reference.
    fn naive_conv(x: &[f64], wt: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
        for i in 0..g.n {
            for co in 0..g.c_out {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = b[co];
                        for ci in 0..g.c_in {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((i * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize]
                                        * wt[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((i * g.c_out + co) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 2, 0)] {
            let g = geom(2, 3, 7, 6, 4, k, stride, pad);
            let x: Vec<f64> = (0..g.n * g.c_in * g.h * g.w).map(|v| ((v * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..g.c_out * g.c_in * k * k).map(|v| ((v * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let b = vec![0.5, -1.0, 0.0, 2.0];
            let fast = conv2d_forward(&x, &wt, &b, &g);
            let slow = naive_conv(&x, &wt, &b, &g);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-9, "k={k} s={stride} p={pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let x = [7.0f32, 7.0, 7.0, 7.0];
        let (out, arg) = maxpool_forward(&x, 1, 2, 2, 2, 2);
        assert_eq!(out, vec![7.0]);
        assert_eq!(arg, vec![0]);
        let dx = maxpool_backward(&[1.0f32], &arg, 4);
        assert_eq!(dx, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bilinear_taps_half_pixel() {
        let out = upsample_forward(&[1.0f64, 3.0], 1, 1, 2, 2);
        assert_eq!(out, vec![1.0, 1.5, 2.5, 3.0, 1.0, 1.5, 2.5, 3.0]);
    }

    #[test]
    fn cross_entropy_skips_zero_weight() {
        let logits = [100.0f64, -100.0];
        let loss = cross_entropy_forward(&logits, &[1], &[0.0], 1, 2, 1);
        assert_eq!(loss, 0.0);
        let grad = cross_entropy_backward(&logits, &[1], &[0.0], 1.0, 2, 1);
        assert_eq!(grad, vec![0.0, 0.0]);
    }
}
