//! One-hot encoding and per-pixel cross-entropy, optionally pixel-weighted.
//!
//! Every loss is normalised by `B * H * W`, the full pixel count, never by
//! the number of valid pixels or the sum of the weights. Scaling the weight
//! map therefore scales the loss.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_ID: u8 = 255;

/// Class-id map `[B, H, W]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub shape: [usize; 3],
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "label length does not match shape");
        LabelMap { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn hw(&self) -> usize {
        self.shape[1] * self.shape[2]
    }

    /// Labels of example `b` as a `[1, H, W]` map.
    pub fn slice(&self, b: usize) -> LabelMap {
        let hw = self.hw();
        LabelMap::new([1, self.shape[1], self.shape[2]], self.data[b * hw..(b + 1) * hw].to_vec())
    }

    /// Checks every value is a class in `0..num_classes` or `ignore_id`.
    pub fn validate(&self, num_classes: usize, ignore_id: u8) -> Result<()> {
        let (h, w) = (self.shape[1], self.shape[2]);
        for (i, &v) in self.data.iter().enumerate() {
            if v != ignore_id && v as usize >= num_classes {
                let (b, y, x) = (i / (h * w), (i / w) % h, i % w);
                return Err(Error::InvalidInput(format!(
                    "label {v} at (batch {b}, row {y}, col {x}) is outside 0..{num_classes} and is not the ignore id {ignore_id}"
                )));
            }
        }
        Ok(())
    }
}

/// One-hot planes `[B, C, H, W]`; ignored pixels are all-zero.
pub fn one_hot<T: Scalar>(label: &LabelMap, num_classes: usize, ignore_id: u8) -> Result<Tensor<T>> {
    label.validate(num_classes, ignore_id)?;
    let [b, h, w] = label.shape;
    let hw = h * w;
    let mut out = vec![T::zero(); b * num_classes * hw];
    for bi in 0..b {
        for p in 0..hw {
            let v = label.data[bi * hw + p];
            if v != ignore_id {
                out[(bi * num_classes + v as usize) * hw + p] = T::one();
            }
        }
    }
    Ok(Tensor::new(vec![b, num_classes, h, w], out))
}

#[derive(Clone, Copy, Debug)]
pub struct LossValue<'g, T: Scalar> {
    pub value: Var<'g, T>,
    pub valid_pixel_count: usize,
}

impl<'g, T: Scalar> LossValue<'g, T> {
    pub fn item(&self) -> f64 {
        self.value.item().as_f64()
    }
}

/// Mean over all `B * H * W` pixels of `w * CE(logits, label)`.
///
/// `weights` is `[B, 1, H, W]` (one weight per pixel) or `[B, C, H, W]` (the
/// ground-truth channel's weight is used). Without weights every pixel has
/// weight one.
pub fn pixel_ce<'g, T: Scalar>(
    logits: Var<'g, T>,
    label: &LabelMap,
    weights: Option<Var<'g, T>>,
    ignore_id: u8,
) -> Result<LossValue<'g, T>> {
    let ls = logits.shape();
    let [b, h, w] = label.shape;
    if ls.len() != 4 || ls[0] != b || ls[2] != h || ls[3] != w {
        return Err(Error::InvalidInput(format!(
            "pixel_ce: logits {ls:?} do not match labels {:?}",
            label.shape
        )));
    }
    let c = ls[1];
    let onehot = one_hot::<T>(label, c, ignore_id)?;
    let valid = label.data.iter().filter(|&&v| v != ignore_id).count();
    if valid == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut picked = logits.log_softmax_channels()?.mul_const(&onehot)?;
    if let Some(wt) = weights {
        let ws = wt.shape();
        if ws.len() != 4 || ws[0] != b || ws[2] != h || ws[3] != w || (ws[1] != 1 && ws[1] != c) {
            return Err(Error::InvalidInput(format!(
                "pixel_ce: weights {ws:?} must be [{b}, 1 or {c}, {h}, {w}]"
            )));
        }
        let wt = if ws[1] == 1 && c != 1 {
            wt.broadcast_channels(c)?
        } else {
            wt
        };
        picked = picked.mul(wt)?;
    }
    let n = (b * h * w) as f64;
    let value = picked.sum()?.scale(T::from_f64(-1.0 / n))?;
    Ok(LossValue {
        value,
        valid_pixel_count: valid,
    })
}

/// `loss_s + loss_t`.
pub fn joint_loss<'g, T: Scalar>(loss_s: LossValue<'g, T>, loss_t: LossValue<'g, T>) -> Result<LossValue<'g, T>> {
    Ok(LossValue {
        value: loss_s.value.add(loss_t.value)?,
        valid_pixel_count: loss_s.valid_pixel_count + loss_t.valid_pixel_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradOptions, Graph};
    use proptest::prelude::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        }
    }

    fn random_case(b: usize, c: usize, h: usize, seed: u64) -> (Tensor<f64>, LabelMap) {
        let mut r = lcg(seed);
        let logits: Vec<f64> = (0..b * c * h * h).map(|_| 4.0 * r() - 2.0).collect();
        let labels: Vec<u8> = (0..b * h * h).map(|_| (r() * c as f64) as u8).collect();
        (
            Tensor::new(vec![b, c, h, h], logits),
            LabelMap::new([b, h, h], labels),
        )
    }

    #[test]
    fn one_hot_examples() {
        let l = LabelMap::new([1, 1, 2], vec![2, IGNORE_ID]);
        let t = one_hot::<f64>(&l, 4, IGNORE_ID).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let bad = LabelMap::new([1, 2, 2], vec![0, 1, 1, 7]);
        let err = one_hot::<f64>(&bad, 4, IGNORE_ID).unwrap_err().to_string();
        assert!(err.contains("row 1, col 1"), "{err}");
    }

    #[test]
    fn one_hot_argmax_round_trip() {
        let (_, l) = random_case(2, 5, 8, 3);
        let t = one_hot::<f64>(&l, 5, IGNORE_ID).unwrap();
        for b in 0..2 {
            for p in 0..64 {
                let arg = (0..5).find(|&k| t.data()[(b * 5 + k) * 64 + p] == 1.0).unwrap();
                assert_eq!(arg as u8, l.data[b * 64 + p]);
            }
        }
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let g = Graph::new();
        let logits = g.constant(Tensor::<f64>::zeros(&[1, 4, 3, 3]));
        let l = LabelMap::new([1, 3, 3], vec![0, 1, 2, 3, 0, 1, 2, 3, 0]);
        let loss = pixel_ce(logits, &l, None, IGNORE_ID).unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(loss.valid_pixel_count, 9);
    }

    #[test]
    fn unit_and_half_weights() {
        let (x, l) = random_case(2, 3, 4, 1);
        for mode in [1, 3] {
            let g = Graph::new();
            let logits = g.constant(x.clone());
            let plain = pixel_ce(logits, &l, None, IGNORE_ID).unwrap().value.item();
            let ones = g.constant(Tensor::full(&[2, mode, 4, 4], 1.0));
            let half = g.constant(Tensor::full(&[2, mode, 4, 4], 0.5));
            let w1 = pixel_ce(logits, &l, Some(ones), IGNORE_ID).unwrap().value.item();
            let wh = pixel_ce(logits, &l, Some(half), IGNORE_ID).unwrap().value.item();
            assert_eq!(plain.to_bits(), w1.to_bits());
            assert_eq!((0.5 * plain).to_bits(), wh.to_bits());
        }
    }

    #[test]
    fn per_class_weights_match_nested_loop_oracle() {
        let (b, c, h) = (2, 3, 8);
        let (x, l) = random_case(b, c, h, 7);
        let mut r = lcg(99);
        let wv: Vec<f64> = (0..b * c * h * h).map(|_| r()).collect();
        let mut expected = 0.0;
        for bi in 0..b {
            for p in 0..h * h {
                let at = |k: usize| x.data()[(bi * c + k) * h * h + p];
                let mx = (0..c).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..c).map(|k| (at(k) - mx).exp()).sum::<f64>().ln();
                let gt = l.data[bi * h * h + p] as usize;
                expected += wv[(bi * c + gt) * h * h + p] * (lse - at(gt));
            }
        }
        expected /= (b * h * h) as f64;
        let g = Graph::new();
        let wt = g.constant(Tensor::new(vec![b, c, h, h], wv));
        let got = pixel_ce(g.constant(x), &l, Some(wt), IGNORE_ID).unwrap().item();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn all_ignored_is_empty_loss() {
        let g = Graph::new();
        let l = LabelMap::new([1, 2, 2], vec![IGNORE_ID; 4]);
        let r = pixel_ce(g.constant(Tensor::<f64>::zeros(&[1, 3, 2, 2])), &l, None, IGNORE_ID);
        assert!(matches!(r, Err(Error::EmptyLoss)));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let g = Graph::new();
        let l = LabelMap::new([1, 2, 2], vec![0; 4]);
        let r = pixel_ce(g.constant(Tensor::<f64>::zeros(&[1, 3, 2, 3])), &l, None, IGNORE_ID);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
        let w = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let r = pixel_ce(g.constant(Tensor::<f64>::zeros(&[1, 3, 2, 2])), &l, Some(w), IGNORE_ID);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn joint_loss_examples() {
        let g = Graph::<f64>::new();
        let lv = |v: f64| LossValue {
            value: g.constant(Tensor::scalar(v)),
            valid_pixel_count: 1,
        };
        assert_eq!(joint_loss(lv(0.5), lv(0.25)).unwrap().item(), 0.75);
        assert_eq!(joint_loss(lv(0.0), lv(1.3)).unwrap().item(), 1.3);
    }

    #[test]
    fn joint_gradient_is_sum_of_gradients() {
        let (x1, l1) = random_case(1, 3, 4, 11);
        let (_, l2) = random_case(1, 3, 4, 12);
        let grad_of = |which: u8| {
            let g = Graph::new();
            let p = g.param(x1.clone());
            let a = pixel_ce(p, &l1, None, IGNORE_ID).unwrap();
            let b = pixel_ce(p, &l2, None, IGNORE_ID).unwrap();
            let out = match which {
                0 => a,
                1 => b,
                _ => joint_loss(a, b).unwrap(),
            };
            g.grad(out.value, &[p], GradOptions::default()).unwrap().values()[0].to_vec()
        };
        let (ga, gb, gj) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gj.len() {
            assert!((gj[i] - ga[i] - gb[i]).abs() < 1e-14);
        }
    }

    fn loss_and_grad(x: &Tensor<f64>, l: &LabelMap, w: &Tensor<f64>) -> (f64, Vec<f64>) {
        let g = Graph::new();
        let p = g.param(x.clone());
        let loss = pixel_ce(p, l, Some(g.constant(w.clone())), IGNORE_ID).unwrap();
        let d = g.grad(loss.value, &[p], GradOptions::default()).unwrap();
        (loss.item(), d.values()[0].to_vec())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn homogeneous_in_weights(seed in 0u64..1000, c in 0.01f64..10.0) {
            let (x, l) = random_case(1, 3, 4, seed);
            let mut r = lcg(seed + 1);
            let w = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| r()).collect());
            let (base, _) = loss_and_grad(&x, &l, &w);
            let (scaled, _) = loss_and_grad(&x, &l, &w.map(|v| v * c));
            prop_assert!((scaled - c * base).abs() <= 1e-12 * (c * base).abs().max(1e-300));
        }

        #[test]
        fn monotone_in_weights(seed in 0u64..1000, pix in 0usize..16, bump in 0.0f64..2.0) {
            let (x, l) = random_case(1, 3, 4, seed);
            let mut r = lcg(seed + 2);
            let w = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| r()).collect());
            let mut wv = w.to_vec();
            wv[pix] += bump;
            let (lo, _) = loss_and_grad(&x, &l, &w);
            let (hi, _) = loss_and_grad(&x, &l, &Tensor::new(vec![1, 1, 4, 4], wv));
            prop_assert!(hi >= lo);
        }

        #[test]
        fn ignoring_a_pixel_equals_zeroing_its_weight(seed in 0u64..1000, pix in 0usize..16) {
            let (x, l) = random_case(1, 3, 4, seed);
            let mut r = lcg(seed + 3);
            let w = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|_| r()).collect());
            let mut ignored = l.clone();
            ignored.data[pix] = IGNORE_ID;
            let mut wz = w.to_vec();
            wz[pix] = 0.0;
            let (li, gi) = loss_and_grad(&x, &ignored, &w);
            let (lz, gz) = loss_and_grad(&x, &l, &Tensor::new(vec![1, 1, 4, 4], wz));
            prop_assert!((li - lz).abs() <= 1e-14);
            for (a, b) in gi.iter().zip(&gz) {
                prop_assert!((a - b).abs() <= 1e-14);
            }
        }
    }
}
