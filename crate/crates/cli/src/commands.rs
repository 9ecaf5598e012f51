use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use metapix::data::{generate, load_corruption_masks, Dataset, Split};
use metapix::eval::{evaluate as eval_net, export_weight_map, weight_separation, IouReport, WeightSeparation};
use metapix::gradcheck::{check_meta_gradient, check_primitives, check_primitives_second_order, CheckReport};
use metapix::losses::{one_hot, IGNORE_ID};
use metapix::meta::{run_schedule, EvalRecord, RunMode, RunOutput, TrainData, Trainer};
use metapix::nn::{weight_forward, Checkpoint, SegConfig, SegNet, WeightConfig, WeightNet};
use metapix::Scalar;
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::{ConfigArgs, OutputArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainKind {
    /// Forces joint mode with N2 = N3 = 0.
    Pretrain,
    Full,
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::resolve(args.config.as_deref(), &args.overrides)
}

/// Creates the run directory and writes the config echo into it.
fn open_run_dir(cfg: &RunConfig, out: &OutputArgs, command: &str) -> Result<PathBuf> {
    let dir = match &out.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = cfg.run_root().join(format!("{command}-{stamp}-s{}", cfg.seed));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    write(&dir.join("config.json"), &cfg.to_json())?;
    log::info!("run directory {}", dir.display());
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<V: Serialize>(path: &Path, v: &V) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

/// Opens the configured dataset, generating it first if the directory has
/// no manifest. An existing dataset must have been generated from the same
/// `DatasetSpec`.
fn ensure_data(cfg: &RunConfig) -> Result<Dataset> {
    let dir = &cfg.paths.data_dir;
    if !dir.join("manifest.json").exists() {
        log::info!("generating dataset in {}", dir.display());
        generate(&cfg.data, dir)?;
    }
    let ds = Dataset::open(dir)?;
    if ds.manifest.spec != cfg.data {
        bail!(
            "dataset in {} was generated with settings that differ from the configured `data` section",
            dir.display()
        );
    }
    Ok(ds)
}

pub fn generate_data(args: &ConfigArgs, out: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(args)?;
    let dir = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
    let m = generate(&cfg.data, &dir)?;
    println!("wrote {} examples to {}", m.entries.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    mode: RunMode,
    steps: u64,
    final_eval: EvalRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_separation: Option<WeightSeparation>,
}

fn finish<T: Scalar>(trainer: &Trainer<T>, dir: &Path, last: Option<EvalRecord>, ds: &Dataset) -> Result<()> {
    let final_eval = match last {
        Some(e) => e,
        None => {
            let r = trainer.evaluate(&ds.load_split(Split::TargetVal)?)?;
            EvalRecord {
                step: trainer.cursor.saturating_sub(1),
                phase_end: "final".into(),
                per_class_iou: r.per_class_iou,
                miou: r.miou,
            }
        }
    };
    let report = IouReport {
        per_class_iou: final_eval.per_class_iou.clone(),
        miou: final_eval.miou,
    };
    let weight_separation = match trainer.mode {
        RunMode::Metapix if trainer.schedule.n2 > 0 => {
            let src = ds.load_split(Split::Source)?;
            let masks = load_corruption_masks(ds)?;
            Some(weight_separation(&trainer.wnet, &src, &masks, trainer.schedule.eval_batch_size)?)
        }
        _ => None,
    };
    write(&dir.join("summary.csv"), &report.to_csv())?;
    write_json(
        &dir.join("summary.json"),
        &Summary {
            mode: trainer.mode,
            steps: trainer.cursor,
            final_eval,
            weight_separation,
        },
    )?;
    print!("{}", report.to_csv());
    Ok(())
}

fn drive<T: Scalar>(mut trainer: Trainer<T>, cfg: &RunConfig, dir: &Path, stop_at: Option<u64>) -> Result<()> {
    let ds = ensure_data(cfg)?;
    let source = ds.load_split(Split::Source)?;
    let target_train = ds.load_split(Split::TargetTrain)?;
    let target_val = ds.load_split(Split::TargetVal)?;
    let data = TrainData {
        source: &source,
        target_train: &target_train,
        target_val: &target_val,
    };
    let out = RunOutput { dir: dir.to_path_buf() };
    let summary = run_schedule(&mut trainer, &data, Some(&out), stop_at)?;
    if trainer.is_done() {
        finish(&trainer, dir, summary.evals.last().cloned(), &ds)?;
    } else {
        println!("stopped at step {} of {}", trainer.cursor, trainer.total_steps());
    }
    Ok(())
}

fn check_matches(cfg: &RunConfig, c: &Checkpoint) -> Result<()> {
    let want = [
        ("schedule", serde_json::to_value(&cfg.schedule)?),
        ("seg_config", serde_json::to_value(&cfg.seg)?),
        ("weight_config", serde_json::to_value(&cfg.weight)?),
        ("seed", serde_json::to_value(cfg.seed)?),
    ];
    for (key, v) in want {
        if c.meta.get(key) != Some(&v) {
            bail!("checkpoint field `{key}` differs from the configuration");
        }
    }
    Ok(())
}

fn train_typed<T: Scalar>(
    cfg: &RunConfig,
    out: &OutputArgs,
    command: &str,
    init_from: Option<&Path>,
    stop_at: Option<u64>,
) -> Result<()> {
    let trainer = match init_from {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            check_matches(cfg, &c)?;
            Trainer::<T>::from_checkpoint(&c, Some(cfg.mode))?
        }
        None => {
            let ds = ensure_data(cfg)?;
            Trainer::<T>::new(
                cfg.schedule.clone(),
                cfg.mode,
                cfg.seg.clone(),
                cfg.weight.clone(),
                cfg.seed,
                ds.manifest.split(Split::Source).count(),
                ds.manifest.split(Split::TargetTrain).count(),
            )?
        }
    };
    let dir = open_run_dir(cfg, out, command)?;
    if let Some(p) = init_from {
        write_json(
            &dir.join("init.json"),
            &serde_json::json!({ "checkpoint": p, "cursor": trainer.cursor }),
        )?;
    }
    drive(trainer, cfg, &dir, stop_at)
}

pub fn train(
    args: &ConfigArgs,
    out: &OutputArgs,
    kind: TrainKind,
    init_from: Option<PathBuf>,
    stop_at: Option<u64>,
) -> Result<()> {
    let mut cfg = resolve(args)?;
    let command = match kind {
        TrainKind::Pretrain => {
            cfg.mode = RunMode::Joint;
            cfg.schedule.n2 = 0;
            cfg.schedule.n3 = 0;
            "pretrain"
        }
        TrainKind::Full => "metapix",
    };
    let init = init_from.as_deref();
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(&cfg, out, command, init, stop_at),
        Precision::F64 => train_typed::<f64>(&cfg, out, command, init, stop_at),
    }
}

pub fn resume(run_dir: &Path, stop_at: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(&run_dir.join("config.json"))?;
    cfg.validate()?;
    let out = RunOutput {
        dir: run_dir.to_path_buf(),
    };
    let path = out.latest_checkpoint();
    if !path.exists() {
        bail!("{} has no checkpoint to resume from", run_dir.display());
    }
    let c = Checkpoint::load(&path)?;
    fn go<T: Scalar>(c: &Checkpoint, cfg: &RunConfig, dir: &Path, stop_at: Option<u64>) -> Result<()> {
        let t = Trainer::<T>::from_checkpoint(c, None)?;
        log::info!("resuming at step {} of {}", t.cursor, t.total_steps());
        drive(t, cfg, dir, stop_at)
    }
    match cfg.precision {
        Precision::F32 => go::<f32>(&c, &cfg, run_dir, stop_at),
        Precision::F64 => go::<f64>(&c, &cfg, run_dir, stop_at),
    }
}

fn meta_field<V: serde::de::DeserializeOwned>(c: &Checkpoint, key: &str) -> Result<V> {
    let v = c
        .meta
        .get(key)
        .cloned()
        .with_context(|| format!("checkpoint has no `{key}` field"))?;
    Ok(serde_json::from_value(v)?)
}

fn checkpoint_dtype(c: &Checkpoint) -> Result<Precision> {
    match c.tensors().first().map(|t| t.dtype.as_str()) {
        Some(d) if d == f32::DTYPE => Ok(Precision::F32),
        Some(d) if d == f64::DTYPE => Ok(Precision::F64),
        other => bail!("unsupported checkpoint dtype {other:?}"),
    }
}

/// Only the segmentation tensors are read; the weighting network plays no
/// part in evaluation.
fn eval_typed<T: Scalar>(c: &Checkpoint, ds: &Dataset, batch_size: usize) -> Result<IouReport> {
    let seg_cfg: SegConfig = meta_field(c, "seg_config")?;
    let mut net = SegNet::<T>::new(seg_cfg, 0)?;
    c.load_params("seg", &mut net.params)?;
    Ok(eval_net(&net, &ds.load_split(Split::TargetVal)?, batch_size)?.miou())
}

pub fn evaluate(args: &ConfigArgs, out: &OutputArgs, checkpoint: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let c = Checkpoint::load(checkpoint)?;
    let ds = ensure_data(&cfg)?;
    let bs = cfg.schedule.eval_batch_size;
    let report = match checkpoint_dtype(&c)? {
        Precision::F32 => eval_typed::<f32>(&c, &ds, bs)?,
        Precision::F64 => eval_typed::<f64>(&c, &ds, bs)?,
    };
    let dir = open_run_dir(&cfg, out, "evaluate")?;
    write_json(&dir.join("init.json"), &serde_json::json!({ "checkpoint": checkpoint }))?;
    write(&dir.join("summary.csv"), &report.to_csv())?;
    write_json(&dir.join("summary.json"), &report)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn export_typed<T: Scalar>(c: &Checkpoint, ds: &Dataset, dir: &Path, count: usize) -> Result<WeightSeparation> {
    let wcfg: WeightConfig = meta_field(c, "weight_config")?;
    let mut wnet = WeightNet::<T>::new(wcfg, 0)?;
    c.load_params("wnet", &mut wnet.params)?;
    let source = ds.load_split(Split::Source)?;
    let n = count.min(source.len());
    let wdir = dir.join("weights");
    fs::create_dir_all(&wdir).with_context(|| format!("creating {}", wdir.display()))?;
    for i in 0..n {
        let b = source.batch::<T>(&[i]);
        let oh = one_hot::<T>(&b.label, wnet.config.num_classes, IGNORE_ID)?;
        let w = weight_forward(&wnet, &b.image, &oh)?;
        export_weight_map(&w, Some(&b.label), &wdir.join(format!("source_{i:04}.png")))?;
    }
    let masks = load_corruption_masks(ds)?;
    Ok(weight_separation(&wnet, &source, &masks, 10)?)
}

pub fn export_weights(args: &ConfigArgs, out: &OutputArgs, checkpoint: &Path, count: usize) -> Result<()> {
    let cfg = resolve(args)?;
    let c = Checkpoint::load(checkpoint)?;
    let ds = ensure_data(&cfg)?;
    let dir = open_run_dir(&cfg, out, "export-weights")?;
    let sep = match checkpoint_dtype(&c)? {
        Precision::F32 => export_typed::<f32>(&c, &ds, &dir, count)?,
        Precision::F64 => export_typed::<f64>(&c, &ds, &dir, count)?,
    };
    write_json(&dir.join("weight_separation.json"), &sep)?;
    println!(
        "mean weight: corrupted {:.4}, clean {:.4} (ratio {:.4})",
        sep.mean_corrupted,
        sep.mean_clean,
        sep.ratio()
    );
    Ok(())
}

/// Returns whether every check passed.
pub fn gradcheck(args: &ConfigArgs, out: &OutputArgs) -> Result<bool> {
    let cfg = resolve(args)?;
    let dir = open_run_dir(&cfg, out, "gradcheck")?;
    let mut reports: Vec<CheckReport> = Vec::new();
    for &seed in &cfg.gradcheck.seeds {
        reports.extend(check_primitives(seed));
        reports.extend(check_primitives_second_order(seed));
        reports.push(check_meta_gradient(seed, &cfg.gradcheck.tiny)?);
    }
    for r in &reports {
        println!("{}", r.summary());
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    write_json(&dir.join("gradcheck.json"), &reports)?;
    println!("{} checks, {failed} failed", reports.len());
    Ok(failed == 0)
}
