//! Synthetic two-domain segmentation data.
//!
//! The target domain is clean: flat-coloured shapes on a shaded background.
//! The source domain is larger, colour-shifted, textured, and a fraction of
//! its images carry a rectangle of poisoned labels. The generator records
//! which pixels were poisoned under `meta/`; training code never opens
//! those files.

mod generate;
mod loader;
mod sampler;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use generate::{generate, render_example, Example};
pub(crate) use generate::write_png_gray as write_gray_png;
pub use loader::{load_batch, load_corruption_masks, Batch, Dataset, SplitData};
pub use sampler::{Sampler, SamplerState};

use crate::error::{Error, Result};
use crate::nn::Domain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetVal,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Source, Split::TargetTrain, Split::TargetVal];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetTrain => "target_train",
            Split::TargetVal => "target_val",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            _ => Domain::Target,
        }
    }
}

/// How the labels inside a corruption rectangle are resampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    /// Every pixel gets an independent uniformly drawn class. The result
    /// behaves like label smoothing: it lowers the target cross-entropy of an
    /// overconfident model, so the meta-gradient favours keeping it.
    Pixel,
    /// One uniformly drawn class fills the whole rectangle.
    Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub image_size: usize,
    /// Including the background class 0.
    pub num_classes: usize,
    pub n_source: usize,
    pub n_target_train: usize,
    pub n_target_val: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Source colour jitter: per-channel gain in `1 ± jitter`, offset in `± jitter / 2`.
    pub color_jitter: f64,
    /// Amplitude of the additive source texture noise.
    pub texture_sigma: f64,
    /// Fraction of source images with a poisoned rectangle.
    pub corruption_rho: f64,
    pub corruption_min_area: f64,
    pub corruption_max_area: f64,
    pub corruption_mode: CorruptionMode,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            image_size: 64,
            num_classes: 5,
            n_source: 400,
            n_target_train: 40,
            n_target_val: 100,
            min_shapes: 2,
            max_shapes: 5,
            color_jitter: 0.25,
            texture_sigma: 0.08,
            corruption_rho: 0.5,
            corruption_min_area: 0.1,
            corruption_max_area: 0.4,
            corruption_mode: CorruptionMode::Region,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.corruption_rho) {
            return bad(format!("data.corruption_rho must lie in [0, 1], got {}", self.corruption_rho));
        }
        if !(0.0 < self.corruption_min_area
            && self.corruption_min_area <= self.corruption_max_area
            && self.corruption_max_area <= 1.0)
        {
            return bad(format!(
                "data.corruption_min_area/max_area must satisfy 0 < min <= max <= 1, got {} and {}",
                self.corruption_min_area, self.corruption_max_area
            ));
        }
        if self.num_classes < 2 || self.num_classes > 254 {
            return bad(format!("data.num_classes must be in 2..=254, got {}", self.num_classes));
        }
        if self.image_size == 0 {
            return bad("data.image_size must be positive".into());
        }
        if self.min_shapes > self.max_shapes {
            return bad(format!(
                "data.min_shapes ({}) exceeds data.max_shapes ({})",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.n_source < 5 * self.n_target_train {
            return bad(format!(
                "data.n_source ({}) must be at least 5 x data.n_target_train ({})",
                self.n_source, self.n_target_train
            ));
        }
        if self.color_jitter < 0.0 || self.texture_sigma < 0.0 {
            return bad("data.color_jitter and data.texture_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Source => self.n_source,
            Split::TargetTrain => self.n_target_train,
            Split::TargetVal => self.n_target_val,
        }
    }

    /// Number of poisoned source images, `floor(rho * n_source)`.
    pub fn num_corrupted(&self) -> usize {
        (self.corruption_rho * self.n_source as f64).floor() as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub domain: Domain,
    pub index: usize,
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corruption_mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}
