// Forward definitions of the primitive set. Each method validates shapes,
// runs the kernel and records the node.

use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{AutodiffError, Op, Result, Var};
use crate::tensor::{numel, Scalar, Tensor};

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn rank4(op: &'static str, s: &[usize]) -> Result<()> {
    if s.len() == 4 {
        Ok(())
    } else {
        Err(mismatch(op, &[s]))
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    fn check_graph(&self, other: &Var<'g, T>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignGraph)
        }
    }

    fn emit(&self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var<'g, T>> {
        self.graph.record(Tensor::new(shape, data), op)
    }

    fn binary(
        &self,
        other: Var<'g, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'g, T>> {
        self.check_graph(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(mismatch(name, &[a.shape(), b.shape()]));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.emit(a.shape().to_vec(), data, op)
    }

    fn unary(&self, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        self.emit(a.shape().to_vec(), data, op)
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: T) -> Result<Var<'g, T>> {
        self.unary(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Result<Var<'g, T>> {
        self.scale(-T::one())
    }

    pub fn add_scalar(&self, s: T) -> Result<Var<'g, T>> {
        self.unary(|x| x + s, Op::AddScalar(self.id))
    }

    /// Elementwise product with a constant array that is not part of the graph.
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Var<'g, T>> {
        let a = self.value();
        if a.shape() != c.shape() {
            return Err(mismatch("mul_const", &[a.shape(), c.shape()]));
        }
        let data = a.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        self.emit(a.shape().to_vec(), data, Op::MulConst(self.id, c.clone()))
    }

    pub fn exp(&self) -> Result<Var<'g, T>> {
        self.unary(|x| x.exp(), Op::Exp(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'g, T>> {
        self.unary(
            |x| {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn relu(&self) -> Result<Var<'g, T>> {
        let a = self.value();
        let mask = a.map(|x| if x > T::zero() { T::one() } else { T::zero() });
        let data = a.data().iter().map(|&x| x.max(T::zero())).collect();
        self.emit(a.shape().to_vec(), data, Op::Relu(self.id, mask))
    }

    /// Square-kernel convolution with padding `K / 2` (no bias).
    pub fn conv2d(&self, w: Var<'g, T>, stride: usize) -> Result<Var<'g, T>> {
        self.check_graph(&w)?;
        let (x, wt) = (self.value(), w.value());
        let geom = ConvGeom::new(x.shape(), wt.shape(), stride)
            .ok_or_else(|| mismatch("conv2d", &[x.shape(), wt.shape()]))?;
        let out = kernels::conv2d(x.data(), wt.data(), &geom);
        self.emit(
            geom.out_shape().to_vec(),
            out,
            Op::Conv2d {
                x: self.id,
                w: w.id,
                stride,
            },
        )
    }

    /// Transposed convolution of `self` (shaped like a conv output) with `w`,
    /// producing an array shaped `in_shape`. This is the input-gradient of
    /// `conv2d` and is itself differentiable.
    pub fn conv2d_input_grad(
        &self,
        w: Var<'g, T>,
        stride: usize,
        in_shape: &[usize],
    ) -> Result<Var<'g, T>> {
        self.check_graph(&w)?;
        let (gy, wt) = (self.value(), w.value());
        let geom = ConvGeom::new(in_shape, wt.shape(), stride)
            .filter(|g| g.out_shape().as_slice() == gy.shape())
            .ok_or_else(|| mismatch("conv2d_input_grad", &[gy.shape(), wt.shape(), in_shape]))?;
        let out = kernels::conv2d_input_grad(gy.data(), wt.data(), &geom);
        self.emit(
            in_shape.to_vec(),
            out,
            Op::ConvInputGrad {
                gy: self.id,
                w: w.id,
                stride,
            },
        )
    }

    /// Weight-gradient of `conv2d`: correlates the input `self` with the
    /// output-shaped `gy`, giving a `[Co, Ci, k, k]` array.
    pub fn conv2d_weight_grad(&self, gy: Var<'g, T>, stride: usize, k: usize) -> Result<Var<'g, T>> {
        self.check_graph(&gy)?;
        let (x, g) = (self.value(), gy.value());
        rank4("conv2d_weight_grad", x.shape())?;
        rank4("conv2d_weight_grad", g.shape())?;
        let w_shape = [g.shape()[1], x.shape()[1], k, k];
        let geom = ConvGeom::new(x.shape(), &w_shape, stride)
            .filter(|geo| geo.out_shape().as_slice() == g.shape())
            .ok_or_else(|| mismatch("conv2d_weight_grad", &[x.shape(), g.shape()]))?;
        let out = kernels::conv2d_weight_grad(x.data(), g.data(), &geom);
        self.emit(
            w_shape.to_vec(),
            out,
            Op::ConvWeightGrad {
                x: self.id,
                gy: gy.id,
                stride,
            },
        )
    }

    /// Broadcasts a `[C]` vector over an NCHW array of the given shape.
    pub fn broadcast_bias(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let b = self.value();
        if shape.len() != 4 || b.shape() != [shape[1]] {
            return Err(mismatch("broadcast_bias", &[b.shape(), shape]));
        }
        let out = kernels::broadcast_bias(b.data(), shape);
        self.emit(shape.to_vec(), out, Op::BroadcastBias(self.id))
    }

    /// `[N, C, H, W] -> [C]`.
    pub fn sum_to_bias(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        rank4("sum_to_bias", x.shape())?;
        let out = kernels::sum_to_bias(x.data(), x.shape());
        self.emit(vec![x.shape()[1]], out, Op::SumToBias(self.id))
    }

    /// `self + broadcast(b)` for a per-channel bias `b`.
    pub fn bias_add(&self, b: Var<'g, T>) -> Result<Var<'g, T>> {
        self.add(b.broadcast_bias(&self.shape())?)
    }

    /// Picks flat elements `idx` into an array of shape `out_shape`.
    pub fn gather(&self, idx: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(out_shape) != idx.len() {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                reason: format!("{} indices for output shape {out_shape:?}", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                reason: format!("index {bad} out of range for {} elements", x.len()),
            });
        }
        let out = kernels::gather(x.data(), &idx);
        self.emit(out_shape.to_vec(), out, Op::Gather { x: self.id, idx })
    }

    /// Adjoint of [`Var::gather`]: sums `self[j]` into slot `idx[j]` of a
    /// zero array of shape `in_shape`.
    pub fn scatter_add(&self, idx: Arc<Vec<usize>>, in_shape: &[usize]) -> Result<Var<'g, T>> {
        let g = self.value();
        let len = numel(in_shape);
        if g.len() != idx.len() || idx.iter().any(|&i| i >= len) {
            return Err(AutodiffError::InvalidArgument {
                op: "scatter_add",
                reason: format!("{} values, {} indices, target {in_shape:?}", g.len(), idx.len()),
            });
        }
        let out = kernels::scatter_add(g.data(), &idx, len);
        self.emit(in_shape.to_vec(), out, Op::ScatterAdd { g: self.id, idx })
    }

    /// 2x2 max pooling with stride 2 and ceil-mode output size. Ties route
    /// to the first index.
    pub fn maxpool2(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        rank4("maxpool2", s)?;
        let (_, idx) = kernels::maxpool2(x.data(), s);
        self.gather(Arc::new(idx), &[s[0], s[1], s[2].div_ceil(2), s[3].div_ceil(2)])
    }

    /// Keeps the top-left `h x w` window of every plane.
    pub fn crop(&self, h: usize, w: usize) -> Result<Var<'g, T>> {
        let s = self.shape();
        rank4("crop", &s)?;
        if h > s[2] || w > s[3] {
            return Err(AutodiffError::InvalidArgument {
                op: "crop",
                reason: format!("cannot crop {s:?} to {h}x{w}"),
            });
        }
        if h == s[2] && w == s[3] {
            return Ok(*self);
        }
        let idx = kernels::crop_indices(&s, h, w);
        self.gather(Arc::new(idx), &[s[0], s[1], h, w])
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        rank4("upsample2", s)?;
        let out = kernels::upsample2(x.data(), s);
        self.emit(vec![s[0], s[1], s[2] * 2, s[3] * 2], out, Op::Upsample2(self.id))
    }

    /// Sum over 2x2 windows; adjoint of [`Var::upsample2`].
    pub fn sumpool2(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        rank4("sumpool2", s)?;
        if !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(mismatch("sumpool2", &[s]));
        }
        let out = kernels::sumpool2(x.data(), s);
        self.emit(vec![s[0], s[1], s[2] / 2, s[3] / 2], out, Op::SumPool2(self.id))
    }

    /// Concatenates NCHW arrays along the channel axis.
    pub fn concat_channels(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?;
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape().to_vec();
        rank4("concat", &s0)?;
        for (p, v) in parts.iter().zip(&values) {
            first.check_graph(p)?;
            let s = v.shape();
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                let shapes: Vec<&[usize]> = values.iter().map(|v| v.shape()).collect();
                return Err(mismatch("concat", &shapes));
            }
        }
        let hw = s0[2] * s0[3];
        let slices: Vec<(&[T], usize)> = values.iter().map(|v| (v.data(), v.shape()[1])).collect();
        let total: usize = slices.iter().map(|s| s.1).sum();
        let out = kernels::concat_channels(&slices, s0[0], hw);
        first.emit(
            vec![s0[0], total, s0[2], s0[3]],
            out,
            Op::Concat(parts.iter().map(|p| p.id).collect()),
        )
    }

    /// Channels `start..start + len`.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        rank4("narrow", s)?;
        if start + len > s[1] {
            return Err(mismatch("narrow", &[s]));
        }
        let out = kernels::narrow_channels(x.data(), s[0], s[1], s[2] * s[3], start, len);
        self.emit(
            vec![s[0], len, s[2], s[3]],
            out,
            Op::Narrow {
                x: self.id,
                start,
            },
        )
    }

    /// Places `self` at channel `start` of a zero array with `total` channels.
    pub fn pad_channels(&self, start: usize, total: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        rank4("pad_channels", s)?;
        if start + s[1] > total {
            return Err(mismatch("pad_channels", &[s]));
        }
        let out = kernels::pad_channels(x.data(), s[0], s[1], s[2] * s[3], start, total);
        self.emit(
            vec![s[0], total, s[2], s[3]],
            out,
            Op::PadChannels {
                x: self.id,
                start,
            },
        )
    }

    /// Log-softmax over the channel axis of an NCHW array.
    pub fn log_softmax_channels(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        rank4("log_softmax", x.shape())?;
        let out = kernels::log_softmax_channels(x.data(), x.shape());
        self.emit(x.shape().to_vec(), out, Op::LogSoftmax(self.id))
    }

    /// `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn sum_channels(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        rank4("sum_channels", s)?;
        let out = kernels::sum_channels(x.data(), s);
        self.emit(vec![s[0], 1, s[2], s[3]], out, Op::SumChannels(self.id))
    }

    /// `[N, 1, H, W] -> [N, c, H, W]`.
    pub fn broadcast_channels(&self, c: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let s = x.shape();
        rank4("broadcast_channels", s)?;
        if s[1] != 1 {
            return Err(mismatch("broadcast_channels", &[s]));
        }
        let out = kernels::broadcast_channels(x.data(), s[0], c, s[2] * s[3]);
        self.emit(vec![s[0], c, s[2], s[3]], out, Op::BroadcastChannels(self.id))
    }

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Result<Var<'g, T>> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum();
        self.emit(Vec::new(), vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'g, T>> {
        let n = T::from_f64(self.numel() as f64);
        self.sum()?.scale(T::one() / n)
    }

    /// Repeats a one-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.len() != 1 {
            return Err(mismatch("expand", &[x.shape(), shape]));
        }
        self.emit(shape.to_vec(), vec![x.data()[0]; numel(shape)], Op::Expand(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        if numel(shape) != x.len() {
            return Err(mismatch("reshape", &[x.shape(), shape]));
        }
        self.emit(shape.to_vec(), x.to_vec(), Op::Reshape(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Graph;
    use super::*;

    #[test]
    fn relu_definition() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_symmetry_point() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1], &[0.0]));
        assert_eq!(x.sigmoid().unwrap().value().data(), &[0.5]);
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval_for_moderate_inputs() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_f64(&[4], &[-15.0, -3.0, 3.0, 15.0]));
        for v in x.sigmoid().unwrap().value().data() {
            assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn add_shape_mismatch_names_primitive() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        match a.add(b) {
            Err(AutodiffError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![vec![2], vec![3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(matches!(
            x.conv2d(w, 1),
            Err(AutodiffError::ShapeMismatch { op: "conv2d", .. })
        ));
    }

    #[test]
    fn stride_two_conv_halves_resolution() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
        let w = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
        assert_eq!(x.conv2d(w, 2).unwrap().shape(), vec![1, 3, 4, 4]);
    }

    #[test]
    fn maxpool_and_upsample_shapes() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 4.0, 3.0, 2.0]));
        let p = x.maxpool2().unwrap();
        assert_eq!(p.value().data(), &[4.0]);
        let u = p.upsample2().unwrap();
        assert_eq!(u.value().data(), &[4.0; 4]);
        assert!(x.narrow_channels(0, 2).is_err());
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 1, 1, 2], &[1., 2., 3., 4.]));
        let b = g.constant(Tensor::from_f64(&[2, 2, 1, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]));
        let c = Var::concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 1, 2]);
        assert!(c.narrow_channels(0, 1).unwrap().value().bit_eq(&a.value()));
        assert!(c.narrow_channels(1, 2).unwrap().value().bit_eq(&b.value()));
    }
}
