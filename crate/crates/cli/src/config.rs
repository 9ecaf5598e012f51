use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use metapix::data::DatasetSpec;
use metapix::gradcheck::TinyConfig;
use metapix::meta::{RunMode, Schedule};
use metapix::nn::{SegConfig, WeightConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset directory; generated from `data` on first use.
    pub data_dir: PathBuf,
    /// Parent of timestamped run directories. Falls back to the
    /// `METAPIX_RUN_ROOT` environment variable, then `runs`.
    pub run_root: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: PathBuf::from("data"),
            run_root: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    pub tiny: TinyConfig,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: vec![0, 1, 2],
            tiny: TinyConfig::default(),
        }
    }
}

/// Everything a run depends on. The resolved value is written to
/// `config.json` in the run directory before any work starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub mode: RunMode,
    pub data: DatasetSpec,
    pub seg: SegConfig,
    pub weight: WeightConfig,
    pub schedule: Schedule,
    pub gradcheck: GradcheckConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            mode: RunMode::Metapix,
            data: DatasetSpec::default(),
            seg: SegConfig::default(),
            weight: WeightConfig::default(),
            schedule: Schedule::default(),
            gradcheck: GradcheckConfig::default(),
            paths: Paths::default(),
        }
    }
}

fn from_value(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        anyhow!("invalid config field `{path}`: {}", e.inner())
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        from_value(v).with_context(|| format!("in config {}", path.display()))
    }

    /// Loads `path` (or the defaults) and applies `key=value` overrides in
    /// order, then validates the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let cfg = base.with_overrides(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies flat dotted overrides such as `schedule.N2=600`. Values are
    /// parsed as JSON when possible and taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serialises");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{item}` is not of the form key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
            from_value(root.clone()).with_context(|| format!("override `{item}`"))?;
        }
        from_value(root)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.schedule.validate()?;
        let c = self.data.num_classes;
        if self.seg.num_classes != c || self.weight.num_classes != c {
            bail!(
                "seg.num_classes ({}) and weight.num_classes ({}) must equal data.num_classes ({c})",
                self.seg.num_classes,
                self.weight.num_classes
            );
        }
        if self.gradcheck.seeds.is_empty() {
            bail!("gradcheck.seeds must not be empty");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    pub fn run_root(&self) -> PathBuf {
        self.paths
            .run_root
            .clone()
            .or_else(|| std::env::var_os("METAPIX_RUN_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let so_far = parts[..=i].join(".");
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("unknown config key `{key}`: `{}` is not a section", parts[..i].join(".")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| anyhow!("unknown config key `{so_far}`"))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    bail!("empty config key")
}
