//! Confusion matrices, IoU and weight-map export.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitData;
use crate::error::{Error, Result};
use crate::losses::{one_hot, LabelMap, IGNORE_ID};
use crate::nn::{seg_forward, weight_forward, Domain, SegNet, WeightNet};
use crate::tensor::{Scalar, Tensor};

/// `C x C` pixel counts, rows = ground truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over present classes (0 when none is present).
    pub miou: f64,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pixel per position; truths equal to `ignore_id` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8], ignore_id: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::InvalidInput(format!(
                "accumulate: prediction has {} pixels, truth has {}",
                pred.len(),
                truth.len()
            )));
        }
        let c = self.num_classes;
        for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
            if t == ignore_id {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::InvalidInput(format!(
                    "accumulate: pixel {i} has truth {t} / prediction {p} outside 0..{c}"
                )));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn miou(&self) -> IouReport {
        let c = self.num_classes;
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let absent = c - present.len();
        if absent > 0 {
            log::info!("miou: {absent} class(es) absent from truth and prediction, excluded from the mean");
        }
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport { per_class_iou, miou }
    }
}

impl IouReport {
    /// `class,iou` rows, then `miou,<value>`. Absent classes have an empty
    /// IoU field.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (k, v) in self.per_class_iou.iter().enumerate() {
            match v {
                Some(v) => writeln!(s, "{k},{v:.6}").unwrap(),
                None => writeln!(s, "{k},").unwrap(),
            }
        }
        writeln!(s, "miou,{:.6}", self.miou).unwrap();
        s
    }
}

/// Per-pixel argmax over channels of `[B, C, H, W]` logits; ties go to the
/// lowest class.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(bi * c + k) * hw + p] > d[(bi * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Confusion of `net`'s target-domain predictions over a whole split.
pub fn evaluate<T: Scalar>(net: &SegNet<T>, data: &SplitData, batch_size: usize) -> Result<Confusion> {
    let mut conf = Confusion::new(net.num_classes());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = data.batch::<T>(chunk);
        let logits = seg_forward(net, &batch.image, Domain::Target)?;
        conf.accumulate(&argmax_channels(&logits), &batch.label.data, IGNORE_ID)?;
    }
    Ok(conf)
}

/// `round(255 * w)` with halves rounded up, clamped to 0..=255.
pub fn quantize_weight(w: f64) -> u8 {
    (255.0 * w + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a `[1, m, H, W]` weight map as an 8-bit grayscale PNG. For
/// `m > 1` the ground-truth channel is exported when `label` is given,
/// channel 0 otherwise.
pub fn export_weight_map<T: Scalar>(w: &Tensor<T>, label: Option<&LabelMap>, path: &Path) -> Result<()> {
    let s = w.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::InvalidInput(format!("weight map must be [1, m, H, W], got {s:?}")));
    }
    let (m, h, wd) = (s[1], s[2], s[3]);
    let hw = h * wd;
    if let Some(l) = label {
        if l.shape != [1, h, wd] {
            return Err(Error::InvalidInput(format!(
                "label {:?} does not match weight map {s:?}",
                l.shape
            )));
        }
    }
    let d = w.data();
    let pixels: Vec<u8> = (0..hw)
        .map(|p| {
            let ch = match label {
                Some(l) if m > 1 && l.data[p] != IGNORE_ID && (l.data[p] as usize) < m => l.data[p] as usize,
                _ => 0,
            };
            quantize_weight(d[ch * hw + p].as_f64())
        })
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    crate::data::write_gray_png(path, wd, h, pixels)
}

/// Mean learned weight over poisoned and clean source pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSeparation {
    pub mean_corrupted: f64,
    pub mean_clean: f64,
    pub n_corrupted: u64,
    pub n_clean: u64,
}

impl WeightSeparation {
    /// `mean_corrupted / mean_clean`.
    pub fn ratio(&self) -> f64 {
        self.mean_corrupted / self.mean_clean
    }
}

/// Applies `wnet` to every source image and averages its weights (the
/// ground-truth channel for per-class maps) separately over pixels the
/// generator poisoned (`mask != 0`) and all other non-ignored pixels.
pub fn weight_separation<T: Scalar>(
    wnet: &WeightNet<T>,
    source: &SplitData,
    masks: &[Vec<u8>],
    batch_size: usize,
) -> Result<WeightSeparation> {
    if masks.len() != source.len() {
        return Err(Error::InvalidInput(format!(
            "{} masks for {} source images",
            masks.len(),
            source.len()
        )));
    }
    let c = wnet.config.num_classes;
    let m = wnet.out_channels();
    let hw = source.size * source.size;
    let (mut sc, mut nc, mut sk, mut nk) = (0.0, 0u64, 0.0, 0u64);
    let idx: Vec<usize> = (0..source.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = source.batch::<T>(chunk);
        let oh = one_hot::<T>(&batch.label, c, IGNORE_ID)?;
        let w = weight_forward(wnet, &batch.image, &oh)?;
        let d = w.data();
        for (bi, &i) in chunk.iter().enumerate() {
            for p in 0..hw {
                let l = batch.label.data[bi * hw + p];
                if l == IGNORE_ID {
                    continue;
                }
                let ch = if m == 1 { 0 } else { l as usize };
                let v = d[(bi * m + ch) * hw + p].as_f64();
                if masks[i][p] != 0 {
                    sc += v;
                    nc += 1;
                } else {
                    sk += v;
                    nk += 1;
                }
            }
        }
    }
    Ok(WeightSeparation {
        mean_corrupted: if nc > 0 { sc / nc as f64 } else { f64::NAN },
        mean_clean: if nk > 0 { sk / nk as f64 } else { f64::NAN },
        n_corrupted: nc,
        n_clean: nk,
    })
}
