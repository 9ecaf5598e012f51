#![allow(dead_code)]

use metapix::data::{generate, Dataset, DatasetSpec, Split, SplitData};
use metapix::meta::{Phase, RunMode, Schedule, StepRecord, TrainData, Trainer};
use metapix::nn::{SegConfig, WeightConfig};
use metapix::Scalar;
use tempfile::TempDir;

pub const C: usize = 3;

pub fn tiny_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        image_size: 32,
        num_classes: C,
        n_source: 20,
        n_target_train: 4,
        n_target_val: 4,
        seed,
        ..DatasetSpec::default()
    }
}

pub struct Tiny {
    pub dir: TempDir,
    pub ds: Dataset,
    pub source: SplitData,
    pub target_train: SplitData,
    pub target_val: SplitData,
}

impl Tiny {
    pub fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        generate(&tiny_spec(seed), dir.path()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        Tiny {
            source: ds.load_split(Split::Source).unwrap(),
            target_train: ds.load_split(Split::TargetTrain).unwrap(),
            target_val: ds.load_split(Split::TargetVal).unwrap(),
            ds,
            dir,
        }
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData {
            source: &self.source,
            target_train: &self.target_train,
            target_val: &self.target_val,
        }
    }
}

pub fn seg_cfg(split_at: usize) -> SegConfig {
    SegConfig {
        num_classes: C,
        split_at,
        widths: vec![4; 5],
        zero_score_init: false,
    }
}

pub fn weight_cfg() -> WeightConfig {
    WeightConfig {
        num_classes: C,
        width: 4,
        zero_final: false,
        ..WeightConfig::default()
    }
}

pub fn schedule(n1: u64, n2: u64, n3: u64, g: u64) -> Schedule {
    Schedule {
        n1,
        n2,
        n3,
        g,
        alpha: 1e-2,
        beta: 1e-3,
        eval_batch_size: 2,
        ..Schedule::default()
    }
}

pub fn trainer<T: Scalar>(tiny: &Tiny, sched: Schedule, mode: RunMode, seed: u64) -> Trainer<T> {
    Trainer::new(sched, mode, seg_cfg(1), weight_cfg(), seed, tiny.source.len(), tiny.target_train.len()).unwrap()
}

/// Runs `steps` steps and checks, after every one, that a meta step left
/// the segmentation network and its optimizer bitwise unchanged and that
/// any other step left the weighting network and its optimizer bitwise
/// unchanged. Returns a description of the first violation.
pub fn audit<T: Scalar>(t: &mut Trainer<T>, data: &TrainData<'_>, steps: u64) -> Result<Vec<StepRecord>, String> {
    let mut records = Vec::new();
    for _ in 0..steps {
        if t.is_done() {
            break;
        }
        let (seg, seg_opt, wnet, meta_opt) = (t.seg.clone(), t.seg_opt.clone(), t.wnet.clone(), t.meta_opt.clone());
        let rec = t.step(data).map_err(|e| e.to_string())?;
        let kept = |what: &str, ok: bool| if ok { Ok(()) } else { Err(format!("step {}: {what} changed", rec.step)) };
        match rec.phase {
            Phase::Meta => {
                kept("segmentation parameters", t.seg.params.bit_eq(&seg.params))?;
                kept("segmentation optimizer", t.seg_opt.bit_eq(&seg_opt))?;
            }
            _ => {
                kept("weighting parameters", t.wnet.params.bit_eq(&wnet.params))?;
                kept("meta optimizer", t.meta_opt.bit_eq(&meta_opt))?;
            }
        }
        records.push(rec);
    }
    Ok(records)
}
