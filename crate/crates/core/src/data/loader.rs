use std::fs;
use std::path::{Path, PathBuf};

use super::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE_ID};
use crate::nn::Domain;
use crate::tensor::{Scalar, Tensor};

/// A generated dataset directory and its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// Images `[B, 3, H, W]` in [0, 1] and labels `[B, H, W]` from one domain.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub image: Tensor<T>,
    pub label: LabelMap,
    pub domain: Domain,
    /// Example indices within the split.
    pub indices: Vec<usize>,
}

/// A whole split decoded into memory as 8-bit arrays.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub split: Split,
    pub size: usize,
    pub num_classes: usize,
    /// Row-major RGB per example.
    pub images: Vec<Vec<u8>>,
    pub labels: Vec<Vec<u8>>,
}

fn read_rgb(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::format(
            path,
            format!("expected {size}x{size}, found {}x{}", img.width(), img.height()),
        ));
    }
    Ok(img.into_raw())
}

fn read_gray(path: &Path, size: usize) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    if !matches!(img, image::DynamicImage::ImageLuma8(_)) {
        return Err(Error::format(path, "expected an 8-bit single-channel image"));
    }
    let img = img.to_luma8();
    if img.width() as usize != size || img.height() as usize != size {
        return Err(Error::format(
            path,
            format!("expected {size}x{size}, found {}x{}", img.width(), img.height()),
        ));
    }
    Ok(img.into_raw())
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let path = root.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Json { path, source: e })?;
        Ok(Dataset { root, manifest })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes
    }

    pub fn image_size(&self) -> usize {
        self.manifest.spec.image_size
    }

    fn entry(&self, split: Split, index: usize) -> Result<&ManifestEntry> {
        self.manifest
            .split(split)
            .find(|e| e.index == index)
            .ok_or_else(|| {
                Error::InvalidInput(format!("no example {index} in split {}", split.dir_name()))
            })
    }

    fn read_example(&self, e: &ManifestEntry) -> Result<(Vec<u8>, Vec<u8>)> {
        let size = self.image_size();
        let c = self.num_classes();
        let image = read_rgb(&self.root.join(&e.image), size)?;
        let label_path = self.root.join(&e.label);
        let label = read_gray(&label_path, size)?;
        if let Some(bad) = label.iter().find(|&&v| v != IGNORE_ID && v as usize >= c) {
            return Err(Error::format(
                &label_path,
                format!("label value {bad} is outside 0..{c} and is not {IGNORE_ID}"),
            ));
        }
        Ok((image, label))
    }

    /// Decodes every example of `split`, ordered by index.
    pub fn load_split(&self, split: Split) -> Result<SplitData> {
        let mut entries: Vec<&ManifestEntry> = self.manifest.split(split).collect();
        entries.sort_by_key(|e| e.index);
        let mut images = Vec::with_capacity(entries.len());
        let mut labels = Vec::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.index != i {
                return Err(Error::format(
                    self.root.join("manifest.json"),
                    format!("split {} is missing example {i}", split.dir_name()),
                ));
            }
            let (im, lb) = self.read_example(e)?;
            images.push(im);
            labels.push(lb);
        }
        Ok(SplitData {
            split,
            size: self.image_size(),
            num_classes: self.num_classes(),
            images,
            labels,
        })
    }
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Assembles the examples at `indices` into one batch.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Batch<T> {
        let s = self.size;
        let hw = s * s;
        let mut image = Vec::with_capacity(indices.len() * 3 * hw);
        let mut label = Vec::with_capacity(indices.len() * hw);
        for &i in indices {
            let src = &self.images[i];
            for ch in 0..3 {
                image.extend((0..hw).map(|p| T::from_f64(src[p * 3 + ch] as f64 / 255.0)));
            }
            label.extend_from_slice(&self.labels[i]);
        }
        Batch {
            image: Tensor::new(vec![indices.len(), 3, s, s], image),
            label: LabelMap::new([indices.len(), s, s], label),
            domain: self.split.domain(),
            indices: indices.to_vec(),
        }
    }
}

/// Reads examples `index .. index + batch_size` of `split` straight from disk.
pub fn load_batch<T: Scalar>(dataset: &Dataset, split: Split, index: usize, batch_size: usize) -> Result<Batch<T>> {
    if batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut part = SplitData {
        split,
        size: dataset.image_size(),
        num_classes: dataset.num_classes(),
        images: Vec::new(),
        labels: Vec::new(),
    };
    for i in index..index + batch_size {
        let (im, lb) = dataset.read_example(dataset.entry(split, i)?)?;
        part.images.push(im);
        part.labels.push(lb);
    }
    let idx: Vec<usize> = (0..batch_size).collect();
    let mut b = part.batch(&idx);
    b.indices = (index..index + batch_size).collect();
    Ok(b)
}

/// Poisoned-pixel masks of the source split (255 = poisoned), ordered by
/// index. Evaluation only.
pub fn load_corruption_masks(dataset: &Dataset) -> Result<Vec<Vec<u8>>> {
    let mut entries: Vec<&ManifestEntry> = dataset.manifest.split(Split::Source).collect();
    entries.sort_by_key(|e| e.index);
    entries
        .iter()
        .map(|e| {
            let rel = e.corruption_mask.as_ref().ok_or_else(|| {
                Error::format(dataset.root.join("manifest.json"), format!("source example {} has no mask", e.index))
            })?;
            read_gray(&dataset.root.join(rel), dataset.image_size())
        })
        .collect()
}
