use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

struct Env {
    tmp: TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.json");
        let cfg = json!({
            "seed": 3,
            "data": {"image_size": 32, "num_classes": 3, "n_source": 20, "n_target_train": 4, "n_target_val": 4},
            "seg": {"num_classes": 3, "widths": [4, 4, 4, 4, 4]},
            "weight": {"num_classes": 3, "width": 4},
            "schedule": {"N1": 4, "N2": 2, "N3": 3, "G": 2, "eval_batch_size": 2},
            "paths": {"data_dir": tmp.path().join("data"), "run_root": tmp.path().join("runs")}
        });
        fs::write(&config, cfg.to_string()).unwrap();
        Env { tmp, config }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.tmp.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_metapix"));
        cmd.args(args).env("RUST_LOG", "warn");
        if !matches!(args.first(), Some(&"resume")) {
            cmd.arg("--config").arg(&self.config);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    }
}

fn summary(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_exits_zero_and_reports_every_check() {
    let env = Env::new();
    let d = env.dir("gc");
    env.ok(&["gradcheck", "--run-dir", s(&d)]);
    let reports: Value = serde_json::from_slice(&fs::read(d.join("gradcheck.json")).unwrap()).unwrap();
    let text = reports.to_string();
    assert!(text.contains("meta"));
    assert!(!text.contains("\"pass\":false"));

    let out = env.run(&["gradcheck", "--run-dir", s(&env.dir("gc2")), "--set", "gradcheck.tiny.tolerance=1e-30"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metapix_without_generations_matches_pretrain() {
    let env = Env::new();
    let (a, b) = (env.dir("pre"), env.dir("mp"));
    env.ok(&["pretrain", "--run-dir", s(&a), "--set", "schedule.N1=6"]);
    env.ok(&["metapix", "--run-dir", s(&b), "--set", "schedule.N1=6", "--set", "schedule.N2=0", "--set", "schedule.N3=0"]);
    let (sa, sb) = (summary(&a), summary(&b));
    assert_eq!(sa["final_eval"]["miou"], sb["final_eval"]["miou"]);
    assert_eq!(fs::read(a.join("summary.csv")).unwrap(), fs::read(b.join("summary.csv")).unwrap());
}

#[test]
fn evaluate_is_deterministic_and_matches_training() {
    let env = Env::new();
    let run = env.dir("run");
    env.ok(&["metapix", "--run-dir", s(&run)]);
    let ckpt = run.join("checkpoints").join("latest.ckpt");
    let (e1, e2) = (env.dir("e1"), env.dir("e2"));
    let o1 = env.ok(&["evaluate", "--run-dir", s(&e1), "--checkpoint", s(&ckpt)]);
    env.ok(&["evaluate", "--run-dir", s(&e2), "--checkpoint", s(&ckpt)]);
    let csv = fs::read(e1.join("summary.csv")).unwrap();
    assert_eq!(csv, fs::read(e2.join("summary.csv")).unwrap());
    assert_eq!(csv, o1.stdout);
    assert_eq!(csv, fs::read(run.join("summary.csv")).unwrap());
}

#[test]
fn resume_finishes_like_an_uninterrupted_run() {
    let env = Env::new();
    let (full, part) = (env.dir("full"), env.dir("part"));
    env.ok(&["metapix", "--run-dir", s(&full)]);
    env.ok(&["metapix", "--run-dir", s(&part), "--stop-at", "5"]);
    assert!(!part.join("summary.json").exists());
    env.ok(&["resume", s(&part)]);
    assert_eq!(fs::read(full.join("summary.csv")).unwrap(), fs::read(part.join("summary.csv")).unwrap());
    assert_eq!(
        fs::read(full.join("checkpoints/latest.ckpt")).unwrap(),
        fs::read(part.join("checkpoints/latest.ckpt")).unwrap()
    );
}

#[test]
fn export_weights_writes_one_png_per_image() {
    let env = Env::new();
    let run = env.dir("run");
    env.ok(&["metapix", "--run-dir", s(&run)]);
    let out = env.dir("w");
    let ckpt = run.join("checkpoints/latest.ckpt");
    env.ok(&["export-weights", "--run-dir", s(&out), "--checkpoint", s(&ckpt), "--count", "3"]);
    let mut names: Vec<_> = fs::read_dir(out.join("weights"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["source_0000.png", "source_0001.png", "source_0002.png"]);
    assert!(out.join("weight_separation.json").exists());
}

#[test]
fn generate_data_writes_the_configured_directory() {
    let env = Env::new();
    let d = env.dir("gen");
    env.ok(&["generate-data", "--out", s(&d)]);
    let m: Value = serde_json::from_slice(&fs::read(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["spec"]["n_source"], 20);
    assert!(d.join("meta").is_dir());
}

#[test]
fn bad_input_exits_nonzero_with_a_named_cause() {
    let env = Env::new();
    let out = env.run(&["metapix", "--set", "schedule.bogus=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schedule.bogus"));

    let out = env.run(&["metapix", "--set", "schedule.N2=\"many\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N2"));

    let out = env.run(&["metapix", "--set", "seg.num_classes=4"]);
    assert_eq!(out.status.code(), Some(2));

    let out = env.run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = env.run(&["evaluate", "--checkpoint", s(&env.dir("missing.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    let out = env.run(&["resume", s(&env.dir("nowhere"))]);
    assert_eq!(out.status.code(), Some(2));
}
