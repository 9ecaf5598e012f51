use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::steps::{meta_step, pretrain_step, target_step, weighted_train_step, Phase, StepRecord};
use crate::data::{Sampler, SamplerState, SplitData};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::nn::{AdamConfig, Checkpoint, Decay, OptimizerState, SegConfig, SegNet, WeightConfig, WeightNet};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Joint pretraining steps.
    #[serde(rename = "N1")]
    pub n1: u64,
    /// Meta steps per generation.
    #[serde(rename = "N2")]
    pub n2: u64,
    /// Weighted training steps per generation.
    #[serde(rename = "N3")]
    pub n3: u64,
    /// Generations.
    #[serde(rename = "G")]
    pub g: u64,
    /// Inner gradient-descent step size used inside the meta objective.
    pub alpha: f64,
    /// Adam learning rate of the weighting network (constant).
    pub beta: f64,
    /// Base Adam learning rate of the segmentation network, decayed
    /// polynomially over all `N1 + G * N3` segmentation steps.
    pub seg_lr: f64,
    pub lr_power: f64,
    pub batch_size: usize,
    /// Re-initialise the weighting network's optimizer at every generation.
    pub reset_meta_optimizer: bool,
    /// Save a checkpoint every this many steps (0: only at phase ends).
    pub checkpoint_every: u64,
    pub eval_batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            n1: 3000,
            n2: 600,
            n3: 900,
            g: 3,
            alpha: 1e-4,
            beta: 1e-4,
            seg_lr: 1e-3,
            lr_power: 0.9,
            batch_size: 1,
            reset_meta_optimizer: false,
            checkpoint_every: 0,
            eval_batch_size: 10,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.g == 0 && self.n2 + self.n3 > 0 {
            return Err(Error::InvalidConfig(
                "schedule.G must be at least 1 when schedule.N2 + schedule.N3 > 0".into(),
            ));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::InvalidConfig(
                "schedule.batch_size and schedule.eval_batch_size must be positive".into(),
            ));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("seg_lr", self.seg_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "schedule.{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn seg_steps(&self) -> u64 {
        self.n1 + self.g * self.n3
    }

    pub fn seg_optimizer(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.seg_lr,
            decay: Decay::Polynomial {
                power: self.lr_power,
                total_steps: self.seg_steps(),
            },
            ..AdamConfig::default()
        }
    }

    pub fn meta_optimizer(&self) -> AdamConfig {
        AdamConfig {
            base_lr: self.beta,
            decay: Decay::None,
            ..AdamConfig::default()
        }
    }
}

/// Which training procedure fills the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Pretraining, then generations of meta steps and weighted steps.
    Metapix,
    /// Unweighted joint steps throughout (no meta steps).
    Joint,
    /// Target-domain steps only.
    TargetOnly,
}

/// Evaluation on the target validation split at a phase boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub phase_end: String,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Splits used by a run.
pub struct TrainData<'a> {
    pub source: &'a SplitData,
    pub target_train: &'a SplitData,
    pub target_val: &'a SplitData,
}

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_META_SOURCE: u64 = 3;
const STREAM_META_TARGET: u64 = 4;

/// Complete resumable training state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub schedule: Schedule,
    pub mode: RunMode,
    pub seed: u64,
    pub seg: SegNet<T>,
    pub wnet: WeightNet<T>,
    pub seg_opt: OptimizerState<T>,
    pub meta_opt: OptimizerState<T>,
    samplers: [Sampler; 4],
    /// Steps completed so far, across all phases.
    pub cursor: u64,
}

/// Position of a step in the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub phase: Phase,
    /// 1-based generation; 0 during pretraining.
    pub generation: u64,
    /// Index within the phase.
    pub offset: u64,
    pub phase_len: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(
        schedule: Schedule,
        mode: RunMode,
        seg_cfg: SegConfig,
        weight_cfg: WeightConfig,
        seed: u64,
        source_len: usize,
        target_len: usize,
    ) -> Result<Self> {
        schedule.validate()?;
        if seg_cfg.num_classes != weight_cfg.num_classes {
            return Err(Error::InvalidConfig(format!(
                "seg.num_classes ({}) differs from weight.num_classes ({})",
                seg_cfg.num_classes, weight_cfg.num_classes
            )));
        }
        if source_len == 0 || target_len == 0 {
            return Err(Error::InvalidInput("training splits must be non-empty".into()));
        }
        let seg = SegNet::new(seg_cfg, seed)?;
        let wnet = WeightNet::new(weight_cfg, seed ^ 0x5745_4947_4854)?;
        let seg_opt = OptimizerState::new(schedule.seg_optimizer(), &seg.params);
        let meta_opt = OptimizerState::new(schedule.meta_optimizer(), &wnet.params);
        let samplers = [
            Sampler::new(source_len, seed, STREAM_SOURCE),
            Sampler::new(target_len, seed, STREAM_TARGET),
            Sampler::new(source_len, seed, STREAM_META_SOURCE),
            Sampler::new(target_len, seed, STREAM_META_TARGET),
        ];
        Ok(Trainer {
            schedule,
            mode,
            seed,
            seg,
            wnet,
            seg_opt,
            meta_opt,
            samplers,
            cursor: 0,
        })
    }

    fn meta_len(&self) -> u64 {
        match self.mode {
            RunMode::Metapix => self.schedule.n2,
            _ => 0,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.n1 + self.schedule.g * (self.meta_len() + self.schedule.n3)
    }

    pub fn is_done(&self) -> bool {
        self.cursor >= self.total_steps()
    }

    /// Where step `cursor` falls in the schedule.
    pub fn slot(&self, cursor: u64) -> Option<Slot> {
        let s = &self.schedule;
        if cursor < s.n1 {
            return Some(Slot {
                phase: Phase::Pretrain,
                generation: 0,
                offset: cursor,
                phase_len: s.n1,
            });
        }
        let per_gen = self.meta_len() + s.n3;
        if per_gen == 0 || cursor >= self.total_steps() {
            return None;
        }
        let r = cursor - s.n1;
        let (generation, within) = (r / per_gen + 1, r % per_gen);
        Some(if within < self.meta_len() {
            Slot {
                phase: Phase::Meta,
                generation,
                offset: within,
                phase_len: self.meta_len(),
            }
        } else {
            Slot {
                phase: Phase::Weighted,
                generation,
                offset: within - self.meta_len(),
                phase_len: s.n3,
            }
        })
    }

    pub fn sampler_states(&self) -> [SamplerState; 4] {
        std::array::from_fn(|i| self.samplers[i].state())
    }

    /// Runs the step at the cursor and advances it.
    pub fn step(&mut self, data: &TrainData<'_>) -> Result<StepRecord> {
        let slot = self
            .slot(self.cursor)
            .ok_or_else(|| Error::InvalidInput("schedule already complete".into()))?;
        let b = self.schedule.batch_size;
        let mut rec = match (slot.phase, self.mode) {
            (Phase::Meta, _) => {
                if slot.offset == 0 && slot.generation > 1 && self.schedule.reset_meta_optimizer {
                    self.meta_opt = OptimizerState::new(self.schedule.meta_optimizer(), &self.wnet.params);
                }
                let bs = data.source.batch(&self.samplers[2].next_batch(b));
                let bt = data.target_train.batch(&self.samplers[3].next_batch(b));
                meta_step(&self.seg, &mut self.wnet, &mut self.meta_opt, &bs, &bt, self.schedule.alpha)?
            }
            (_, RunMode::TargetOnly) => {
                let bt = data.target_train.batch(&self.samplers[1].next_batch(b));
                target_step(&mut self.seg, &mut self.seg_opt, &bt)?
            }
            (Phase::Weighted, RunMode::Metapix) => {
                let bs = data.source.batch(&self.samplers[0].next_batch(b));
                let bt = data.target_train.batch(&self.samplers[1].next_batch(b));
                weighted_train_step(&mut self.seg, &self.wnet, &mut self.seg_opt, &bs, &bt)?
            }
            _ => {
                let bs = data.source.batch(&self.samplers[0].next_batch(b));
                let bt = data.target_train.batch(&self.samplers[1].next_batch(b));
                pretrain_step(&mut self.seg, &mut self.seg_opt, &bs, &bt)?
            }
        };
        rec.step = self.cursor;
        rec.phase = slot.phase;
        self.cursor += 1;
        Ok(rec)
    }

    /// Name of the phase that ends at the current cursor, if any.
    fn phase_end_here(&self) -> Option<String> {
        if self.cursor == 0 {
            return None;
        }
        let s = &self.schedule;
        if self.cursor == s.n1 {
            return Some("pretrain".into());
        }
        let per_gen = self.meta_len() + s.n3;
        if per_gen > 0 && self.cursor > s.n1 && (self.cursor - s.n1).is_multiple_of(per_gen) {
            return Some(format!("generation_{}", (self.cursor - s.n1) / per_gen));
        }
        None
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_params("seg", &self.seg.params);
        c.put_params("wnet", &self.wnet.params);
        self.seg_opt.save_into("seg_opt", &mut c);
        self.meta_opt.save_into("meta_opt", &mut c);
        let m = &mut c.meta;
        m.insert("cursor".into(), serde_json::json!(self.cursor));
        m.insert("seed".into(), serde_json::json!(self.seed));
        m.insert("mode".into(), serde_json::to_value(self.mode).expect("serialises"));
        m.insert("schedule".into(), serde_json::to_value(&self.schedule).expect("serialises"));
        m.insert("seg_config".into(), serde_json::to_value(&self.seg.config).expect("serialises"));
        m.insert("weight_config".into(), serde_json::to_value(&self.wnet.config).expect("serialises"));
        m.insert("samplers".into(), serde_json::to_value(self.sampler_states()).expect("serialises"));
        c
    }

    /// Restores a trainer. The stored mode is used unless `mode` overrides it
    /// (e.g. continuing a shared pretraining prefix as a joint baseline).
    pub fn from_checkpoint(c: &Checkpoint, mode: Option<RunMode>) -> Result<Self> {
        fn field<V: serde::de::DeserializeOwned>(c: &Checkpoint, key: &str) -> Result<V> {
            let v = c
                .meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing field {key}")))?;
            serde_json::from_value(v).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
        }
        let schedule: Schedule = field(c, "schedule")?;
        let seg_cfg: SegConfig = field(c, "seg_config")?;
        let weight_cfg: WeightConfig = field(c, "weight_config")?;
        let seed: u64 = field(c, "seed")?;
        let stored_mode: RunMode = field(c, "mode")?;
        let samplers: [SamplerState; 4] = field(c, "samplers")?;
        let mut t = Trainer::new(
            schedule,
            mode.unwrap_or(stored_mode),
            seg_cfg,
            weight_cfg,
            seed,
            samplers[0].len,
            samplers[1].len,
        )?;
        c.load_params("seg", &mut t.seg.params)?;
        c.load_params("wnet", &mut t.wnet.params)?;
        t.seg_opt = OptimizerState::load_from("seg_opt", c, &t.seg.params)?;
        t.meta_opt = OptimizerState::load_from("meta_opt", c, &t.wnet.params)?;
        t.samplers = samplers.map(Sampler::from_state);
        t.cursor = field(c, "cursor")?;
        Ok(t)
    }

    pub fn evaluate(&self, data: &SplitData) -> Result<crate::eval::IouReport> {
        Ok(evaluate(&self.seg, data, self.schedule.eval_batch_size)?.miou())
    }
}

/// Where a run writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("latest.ckpt")
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub records: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunSummary {
    pub fn final_miou(&self) -> Option<f64> {
        self.evals.last().map(|e| e.miou)
    }
}

/// Keeps only log lines for steps before `cursor`.
fn truncate_log(path: &Path, cursor: u64) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                .is_some_and(|s| s < cursor)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Drives the trainer to the end of its schedule (or until `stop_at` steps
/// have been completed), evaluating on the validation split after
/// pretraining and after every generation.
///
/// With an output directory, every step and evaluation is appended to
/// `metrics.jsonl` and checkpoints go to `checkpoints/` (at every phase end,
/// every `checkpoint_every` steps, and when stopping early).
pub fn run_schedule<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &TrainData<'_>,
    out: Option<&RunOutput>,
    stop_at: Option<u64>,
) -> Result<RunSummary> {
    let mut summary = RunSummary::default();
    let mut log = match out {
        Some(o) => {
            fs::create_dir_all(o.checkpoint_dir()).map_err(|e| Error::io(o.checkpoint_dir(), e))?;
            let path = o.metrics_path();
            truncate_log(&path, trainer.cursor)?;
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
            )
        }
        None => None,
    };
    let mut last_good: Option<PathBuf> = None;
    let save = |trainer: &Trainer<T>, name: &str, last_good: &mut Option<PathBuf>| -> Result<()> {
        let Some(o) = out else { return Ok(()) };
        let path = o.checkpoint_dir().join(name);
        let ckpt = trainer.to_checkpoint();
        let write = |p: &Path| ckpt.save(p);
        write(&path)
            .and_then(|_| write(&o.latest_checkpoint()))
            .map_err(|e| {
                Error::Checkpoint(format!(
                    "{e}; last good checkpoint: {}",
                    last_good
                        .as_ref()
                        .map_or("none".to_string(), |p| p.display().to_string())
                ))
            })?;
        *last_good = Some(path);
        Ok(())
    };
    let mut emit = |line: String| -> Result<()> {
        if let (Some(f), Some(o)) = (log.as_mut(), out) {
            writeln!(f, "{line}").map_err(|e| Error::io(o.metrics_path(), e))?;
        }
        Ok(())
    };

    if trainer.cursor == 0 && trainer.schedule.n1 == 0 {
        log::info!("N1 = 0: skipping pretraining");
    }
    while !trainer.is_done() {
        if stop_at.is_some_and(|s| trainer.cursor >= s) {
            save(trainer, &format!("step_{:08}.ckpt", trainer.cursor), &mut last_good)?;
            return Ok(summary);
        }
        let rec = trainer.step(data)?;
        if rec.step % 100 == 0 {
            log::info!(
                "step {} {:?} loss_s={:?} loss_t={:?} lr={:.3e}",
                rec.step,
                rec.phase,
                rec.loss_s,
                rec.loss_t,
                rec.lr
            );
        }
        emit(serde_json::to_string(&rec).expect("record serialises"))?;
        summary.records.push(rec);
        if let Some(name) = trainer.phase_end_here() {
            let report = trainer.evaluate(data.target_val)?;
            log::info!("{name}: target-val mIoU {:.4}", report.miou);
            let ev = EvalRecord {
                step: trainer.cursor - 1,
                phase_end: name.clone(),
                per_class_iou: report.per_class_iou,
                miou: report.miou,
            };
            emit(serde_json::to_string(&ev).expect("record serialises"))?;
            summary.evals.push(ev);
            save(trainer, &format!("{name}.ckpt"), &mut last_good)?;
        } else if trainer.schedule.checkpoint_every > 0 && trainer.cursor.is_multiple_of(trainer.schedule.checkpoint_every) {
            save(trainer, &format!("step_{:08}.ckpt", trainer.cursor), &mut last_good)?;
        }
    }
    if trainer.total_steps() == 0 {
        let report = trainer.evaluate(data.target_val)?;
        let ev = EvalRecord {
            step: 0,
            phase_end: "init".into(),
            per_class_iou: report.per_class_iou,
            miou: report.miou,
        };
        emit(serde_json::to_string(&ev).expect("record serialises"))?;
        summary.evals.push(ev);
    }
    Ok(summary)
}
