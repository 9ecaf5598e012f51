// Vector-Jacobian products. Every rule below is built from the forward
// primitives in `ops.rs`, which is what makes double backward work.

use super::{Graph, NodeId, Op, Result, Var};
use crate::tensor::Scalar;

impl<T: Scalar> Graph<T> {
    pub(crate) fn backward_rule<'g>(
        &'g self,
        id: NodeId,
        op: &Op<T>,
        g: Var<'g, T>,
        need: &dyn Fn(NodeId) -> bool,
    ) -> Result<Vec<(NodeId, Var<'g, T>)>> {
        let out = self.var(id);
        let shape_of = |n: NodeId| self.node(n).value.shape().to_vec();
        let mut res = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    res.push((*a, g));
                }
                if need(*b) {
                    res.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    res.push((*a, g));
                }
                if need(*b) {
                    res.push((*b, g.neg()?));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    res.push((*a, g.mul(self.var(*b))?));
                }
                if need(*b) {
                    res.push((*b, g.mul(self.var(*a))?));
                }
            }
            Op::Scale(a, s) => res.push((*a, g.scale(*s)?)),
            Op::AddScalar(a) => res.push((*a, g)),
            Op::MulConst(a, c) => res.push((*a, g.mul_const(c)?)),
            Op::Exp(a) => res.push((*a, g.mul(out)?)),
            Op::Sigmoid(a) => {
                // s * (1 - s), expressed through the recorded output
                let one_minus = out.neg()?.add_scalar(T::one())?;
                res.push((*a, g.mul(out.mul(one_minus)?)?));
            }
            // the mask is a constant: relu has zero second derivative
            Op::Relu(a, mask) => res.push((*a, g.mul_const(mask)?)),
            Op::Conv2d { x, w, stride } => {
                let (xv, wv) = (self.var(*x), self.var(*w));
                if need(*x) {
                    res.push((*x, g.conv2d_input_grad(wv, *stride, &shape_of(*x))?));
                }
                if need(*w) {
                    let k = shape_of(*w)[2];
                    res.push((*w, xv.conv2d_weight_grad(g, *stride, k)?));
                }
            }
            Op::ConvInputGrad { gy, w, stride } => {
                let (gyv, wv) = (self.var(*gy), self.var(*w));
                if need(*gy) {
                    res.push((*gy, g.conv2d(wv, *stride)?));
                }
                if need(*w) {
                    let k = shape_of(*w)[2];
                    res.push((*w, g.conv2d_weight_grad(gyv, *stride, k)?));
                }
            }
            Op::ConvWeightGrad { x, gy, stride } => {
                let (xv, gyv) = (self.var(*x), self.var(*gy));
                if need(*x) {
                    res.push((*x, gyv.conv2d_input_grad(g, *stride, &shape_of(*x))?));
                }
                if need(*gy) {
                    res.push((*gy, xv.conv2d(g, *stride)?));
                }
            }
            Op::BroadcastBias(b) => res.push((*b, g.sum_to_bias()?)),
            Op::SumToBias(x) => res.push((*x, g.broadcast_bias(&shape_of(*x))?)),
            Op::Gather { x, idx } => {
                res.push((*x, g.scatter_add(idx.clone(), &shape_of(*x))?));
            }
            Op::ScatterAdd { g: src, idx } => {
                res.push((*src, g.gather(idx.clone(), &shape_of(*src))?));
            }
            Op::Upsample2(x) => res.push((*x, g.sumpool2()?)),
            Op::SumPool2(x) => res.push((*x, g.upsample2()?)),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = shape_of(p)[1];
                    if need(p) {
                        res.push((p, g.narrow_channels(start, c)?));
                    }
                    start += c;
                }
            }
            Op::Narrow { x, start } => {
                let total = shape_of(*x)[1];
                res.push((*x, g.pad_channels(*start, total)?));
            }
            Op::PadChannels { x, start } => {
                let len = shape_of(*x)[1];
                res.push((*x, g.narrow_channels(*start, len)?));
            }
            Op::LogSoftmax(x) => {
                // g - softmax * sum_c(g)
                let c = shape_of(*x)[1];
                let total = g.sum_channels()?.broadcast_channels(c)?;
                let soft = out.exp()?;
                res.push((*x, g.sub(soft.mul(total)?)?));
            }
            Op::SumChannels(x) => {
                let c = shape_of(*x)[1];
                res.push((*x, g.broadcast_channels(c)?));
            }
            Op::BroadcastChannels(x) => res.push((*x, g.sum_channels()?)),
            Op::Sum(x) => res.push((*x, g.expand(&shape_of(*x))?)),
            Op::Expand(x) => res.push((*x, g.sum()?.reshape(&shape_of(*x))?)),
            Op::Reshape(x) => res.push((*x, g.reshape(&shape_of(*x))?)),
        }
        res.retain(|(n, _)| need(*n));
        Ok(res)
    }
}
