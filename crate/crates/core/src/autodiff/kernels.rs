// Raw array kernels behind the primitives. Everything here works on flat
// row-major NCHW slices and knows nothing about graphs.

use crate::tensor::Scalar;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry for input `[B, Ci, H, W]` and weight `[Co, Ci, K, K]` with
    /// "same" padding `K / 2`.
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize) -> Option<Self> {
        if x_shape.len() != 4 || w_shape.len() != 4 || stride == 0 {
            return None;
        }
        let (k, kw) = (w_shape[2], w_shape[3]);
        if k != kw || k % 2 == 0 || w_shape[1] != x_shape[1] {
            return None;
        }
        let pad = k / 2;
        let (in_h, in_w) = (x_shape[2], x_shape[3]);
        if in_h + 2 * pad < k || in_w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            batch: x_shape[0],
            in_c: x_shape[1],
            out_c: w_shape[0],
            in_h,
            in_w,
            out_h: (in_h + 2 * pad - k) / stride + 1,
            out_w: (in_w + 2 * pad - k) / stride + 1,
            k,
            stride,
            pad,
        })
    }

    pub fn in_shape(&self) -> [usize; 4] {
        [self.batch, self.in_c, self.in_h, self.in_w]
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }

    pub fn w_shape(&self) -> [usize; 4] {
        [self.out_c, self.in_c, self.k, self.k]
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in range.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // smallest ox with ox*s + kx >= pad
        let lo = if kx >= self.pad {
            0
        } else {
            (self.pad - kx).div_ceil(s)
        };
        // largest ox with ox*s + kx - pad <= in_w - 1
        let limit = self.in_w + self.pad - 1;
        let hi = if kx > limit {
            0
        } else {
            ((limit - kx) / s + 1).min(self.out_w)
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        (iy < self.in_h).then_some(iy)
    }
}

pub fn conv2d<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (ip, op) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut out = vec![T::zero(); g.batch * g.out_c * op];
    for b in 0..g.batch {
        for co in 0..g.out_c {
            let oplane = &mut out[(b * g.out_c + co) * op..][..op];
            for ci in 0..g.in_c {
                let iplane = &x[(b * g.in_c + ci) * ip..][..ip];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[((co * g.in_c + ci) * g.k + ky) * g.k + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.out_h {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let orow = &mut oplane[oy * g.out_w..][lo..hi];
                            let irow = &iplane[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let src = &irow[lo + kx - g.pad..hi + kx - g.pad];
                                for (o, &i) in orow.iter_mut().zip(src) {
                                    *o = *o + wv * i;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    let ix = (lo + j) * g.stride + kx - g.pad;
                                    *o = *o + wv * irow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Transposed convolution: gradient of `conv2d` with respect to its input.
pub fn conv2d_input_grad<T: Scalar>(gy: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (ip, op) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut dx = vec![T::zero(); g.batch * g.in_c * ip];
    for b in 0..g.batch {
        for ci in 0..g.in_c {
            let dplane = &mut dx[(b * g.in_c + ci) * ip..][..ip];
            for co in 0..g.out_c {
                let gplane = &gy[(b * g.out_c + co) * op..][..op];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[((co * g.in_c + ci) * g.k + ky) * g.k + kx];
                        let (lo, hi) = g.col_range(kx);
                        for oy in 0..g.out_h {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &gplane[oy * g.out_w..][lo..hi];
                            let drow = &mut dplane[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let dst = &mut drow[lo + kx - g.pad..hi + kx - g.pad];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d = *d + wv * gv;
                                }
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ix = (lo + j) * g.stride + kx - g.pad;
                                    drow[ix] = drow[ix] + wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_weight_grad<T: Scalar>(x: &[T], gy: &[T], g: &ConvGeom) -> Vec<T> {
    let (ip, op) = (g.in_h * g.in_w, g.out_h * g.out_w);
    let mut dw = vec![T::zero(); g.out_c * g.in_c * g.k * g.k];
    for co in 0..g.out_c {
        for ci in 0..g.in_c {
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let (lo, hi) = g.col_range(kx);
                    let mut acc = T::zero();
                    for b in 0..g.batch {
                        let gplane = &gy[(b * g.out_c + co) * op..][..op];
                        let iplane = &x[(b * g.in_c + ci) * ip..][..ip];
                        for oy in 0..g.out_h {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let grow = &gplane[oy * g.out_w..][lo..hi];
                            let irow = &iplane[iy * g.in_w..][..g.in_w];
                            if g.stride == 1 {
                                let src = &irow[lo + kx - g.pad..hi + kx - g.pad];
                                let mut row = T::zero();
                                for (&gv, &iv) in grow.iter().zip(src) {
                                    row = row + gv * iv;
                                }
                                acc = acc + row;
                            } else {
                                for (j, &gv) in grow.iter().enumerate() {
                                    let ix = (lo + j) * g.stride + kx - g.pad;
                                    acc = acc + gv * irow[ix];
                                }
                            }
                        }
                    }
                    dw[((co * g.in_c + ci) * g.k + ky) * g.k + kx] = acc;
                }
            }
        }
    }
    dw
}

/// 2x2 stride-2 max pooling with ceil-mode output size: an odd trailing
/// row or column forms a clipped window. Returns the pooled values and, for
/// every output element, the flat input index it was taken from (first
/// index wins ties).
pub fn maxpool2<T: Scalar>(x: &[T], shape: &[usize]) -> (Vec<T>, Vec<usize>) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut vals = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                    if y >= h || xx >= w {
                        continue;
                    }
                    let cand = base + y * w + xx;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                vals.push(x[best]);
                idx.push(best);
            }
        }
    }
    (vals, idx)
}

/// Flat indices of the top-left `oh x ow` window of every plane.
pub fn crop_indices(shape: &[usize], oh: usize, ow: usize) -> Vec<usize> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for y in 0..oh {
            idx.extend((0..ow).map(|x| (p * h + y) * w + x));
        }
    }
    idx
}

/// Nearest-neighbour x2 upsampling of every plane.
pub fn upsample2<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = Vec::with_capacity(planes * h * w * 4);
    for p in 0..planes {
        for y in 0..h {
            let row = &x[(p * h + y) * w..][..w];
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

/// Sum over non-overlapping 2x2 windows; the adjoint of `upsample2`.
pub fn sumpool2<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for oy in 0..oh {
            let r0 = &x[(p * h + 2 * oy) * w..][..w];
            let r1 = &x[(p * h + 2 * oy + 1) * w..][..w];
            for ox in 0..ow {
                out.push(r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
            }
        }
    }
    out
}

/// Numerically stable log-softmax over axis 1 of an NCHW array.
pub fn log_softmax_channels<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(x[base + ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                s = s + (x[base + ch * hw + p] - m).exp();
            }
            let lse = m + s.ln();
            for ch in 0..c {
                out[base + ch * hw + p] = x[base + ch * hw + p] - lse;
            }
        }
    }
    out
}

/// `[N, C, H, W] -> [N, 1, H, W]` sum over channels.
pub fn sum_channels<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); n * hw];
    for b in 0..n {
        let dst = &mut out[b * hw..][..hw];
        for ch in 0..c {
            let src = &x[(b * c + ch) * hw..][..hw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    out
}

/// `[N, 1, H, W] -> [N, C, H, W]` repetition over channels.
pub fn broadcast_channels<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        let src = &x[b * hw..][..hw];
        for _ in 0..c {
            out.extend_from_slice(src);
        }
    }
    out
}

/// `[C] -> [N, C, H, W]`: every plane of channel `c` filled with `b[c]`.
pub fn broadcast_bias<T: Scalar>(b: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = Vec::with_capacity(n * c * hw);
    for _ in 0..n {
        for &v in b.iter().take(c) {
            out.extend(std::iter::repeat_n(v, hw));
        }
    }
    out
}

/// `[N, C, H, W] -> [C]` sum over everything but the channel axis.
pub fn sum_to_bias<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let s: T = x[(b * c + ch) * hw..][..hw].iter().copied().sum();
            *o = *o + s;
        }
    }
    out
}

pub fn gather<T: Scalar>(x: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| x[i]).collect()
}

/// Adjoint of `gather`: accumulates `g[j]` into slot `idx[j]` of a zero array.
pub fn scatter_add<T: Scalar>(g: &[T], idx: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&i, &v) in idx.iter().zip(g) {
        out[i] = out[i] + v;
    }
    out
}

/// Channel-axis concatenation of NCHW arrays sharing N, H and W.
pub fn concat_channels<T: Scalar>(parts: &[(&[T], usize)], n: usize, hw: usize) -> Vec<T> {
    let total: usize = parts.iter().map(|p| p.1).sum();
    let mut out = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for &(data, c) in parts {
            out.extend_from_slice(&data[b * c * hw..][..c * hw]);
        }
    }
    out
}

/// Channels `start..start + len` of an NCHW array with `c` channels.
pub fn narrow_channels<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    hw: usize,
    start: usize,
    len: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * len * hw);
    for b in 0..n {
        out.extend_from_slice(&x[(b * c + start) * hw..][..len * hw]);
    }
    out
}

/// Adjoint of `narrow_channels`: embeds `x` at channel `start` of a zero array.
pub fn pad_channels<T: Scalar>(
    x: &[T],
    n: usize,
    len: usize,
    hw: usize,
    start: usize,
    total: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); n * total * hw];
    for b in 0..n {
        out[(b * total + start) * hw..][..len * hw].copy_from_slice(&x[b * len * hw..][..len * hw]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct nested-loop convolution used as an independent reference.
    fn conv_reference(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_c * g.out_h * g.out_w];
        for b in 0..g.batch {
            for co in 0..g.out_c {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        let mut acc = 0.0;
                        for ci in 0..g.in_c {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= g.in_h as isize
                                        || ix >= g.in_w as isize
                                    {
                                        continue;
                                    }
                                    acc += w[((co * g.in_c + ci) * g.k + ky) * g.k + kx]
                                        * x[((b * g.in_c + ci) * g.in_h + iy as usize) * g.in_w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((b * g.out_c + co) * g.out_h + oy) * g.out_w + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn all_ones_kernel_sums_patches() {
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let w = vec![1.0; 9];
        let g = ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 3, 3], 1).unwrap();
        let out = conv2d(&x, &w, &g);
        // centre: 6+7+8+11+12+13+16+17+18
        assert_eq!(out[12], 108.0);
        assert_eq!(out, conv_reference(&x, &w, &g));
    }

    #[test]
    fn conv_matches_reference_for_both_strides() {
        for (stride, h, w_) in [(1, 6, 7), (2, 8, 8), (2, 7, 5)] {
            let xs = [2, 3, h, w_];
            let ws = [4, 3, 3, 3];
            let g = ConvGeom::new(&xs, &ws, stride).unwrap();
            let x = lcg(xs.iter().product(), 1);
            let w = lcg(ws.iter().product(), 2);
            let got = conv2d(&x, &w, &g);
            let want = conv_reference(&x, &w, &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_adjoints_satisfy_inner_product_identity() {
        // <gy, conv(x, w)> = <conv_input_grad(gy, w), x> = <conv_weight_grad(x, gy), w>
        for stride in [1, 2] {
            let xs = [2, 3, 8, 6];
            let ws = [5, 3, 3, 3];
            let g = ConvGeom::new(&xs, &ws, stride).unwrap();
            let x = lcg(xs.iter().product(), 3);
            let w = lcg(ws.iter().product(), 4);
            let gy = lcg(g.out_shape().iter().product(), 5);
            let y = conv2d(&x, &w, &g);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let t0 = dot(&gy, &y);
            let t1 = dot(&conv2d_input_grad(&gy, &w, &g), &x);
            let t2 = dot(&conv2d_weight_grad(&x, &gy, &g), &w);
            assert!((t0 - t1).abs() < 1e-10, "{t0} vs {t1}");
            assert!((t0 - t2).abs() < 1e-10, "{t0} vs {t2}");
        }
    }

    #[test]
    fn maxpool_prefers_first_index_on_ties() {
        let x = vec![1.0f64, 1.0, 1.0, 1.0];
        let (v, idx) = maxpool2(&x, &[1, 1, 2, 2]);
        assert_eq!(v, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn maxpool_clips_odd_windows() {
        // 3x3 plane: windows {0,1,3,4}, {2,5}, {6,7}, {8}
        let x: Vec<f64> = vec![0.0, 4.0, 1.0, 3.0, 2.0, 7.0, 9.0, 5.0, 6.0];
        let (v, idx) = maxpool2(&x, &[1, 1, 3, 3]);
        assert_eq!(idx, vec![1, 5, 6, 8]);
        assert_eq!(v, vec![4.0, 7.0, 9.0, 6.0]);
    }

    #[test]
    fn crop_keeps_top_left_window() {
        assert_eq!(crop_indices(&[2, 1, 3, 3], 2, 1), vec![0, 3, 9, 12]);
    }

    #[test]
    fn upsample_and_sumpool_are_adjoint() {
        let shape = [1, 2, 3, 4];
        let x = lcg(24, 9);
        let g = lcg(96, 10);
        let up = upsample2(&x, &shape);
        let down = sumpool2(&g, &[1, 2, 6, 8]);
        let a: f64 = up.iter().zip(&g).map(|(p, q)| p * q).sum();
        let b: f64 = down.iter().zip(&x).map(|(p, q)| p * q).sum();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_rows_normalise() {
        let x = lcg(2 * 3 * 4, 11);
        let y = log_softmax_channels(&x, &[2, 3, 2, 2]);
        for b in 0..2 {
            for p in 0..4 {
                let s: f64 = (0..3).map(|c| y[b * 12 + c * 4 + p].exp()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
