use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CorruptionMode, DatasetSpec, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.90],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [1.00, 0.55, 0.10],
    [0.55, 0.30, 0.10],
];

const TARGET_PIXEL_NOISE: f64 = 0.02;
const SHAPE_COLOR_JITTER: f64 = 0.06;

fn class_color(class: usize) -> [f64; 3] {
    if class - 1 < PALETTE.len() {
        return PALETTE[class - 1];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(class as u64);
    [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)]
}

/// One rendered example, 8-bit quantised. `image` is row-major RGB
/// (`H * W * 3`); `label` and `mask` are `H * W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Vec<u8>,
    pub label: Vec<u8>,
    /// 255 where the label was poisoned, 0 elsewhere (source only).
    pub mask: Option<Vec<u8>>,
}

fn stream_id(split: Split, index: usize) -> u64 {
    let code = match split {
        Split::Source => 1u64,
        Split::TargetTrain => 2,
        Split::TargetVal => 3,
    };
    (code << 40) | index as u64
}

/// Indices of the poisoned source images: the first `floor(rho * n)` of a
/// seeded permutation.
pub(crate) fn corrupted_indices(spec: &DatasetSpec) -> HashSet<usize> {
    let mut order: Vec<usize> = (0..spec.n_source).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    order.into_iter().take(spec.num_corrupted()).collect()
}

/// Renders example `index` of `split`. The result depends only on `spec`,
/// the split, the index and whether the example is poisoned.
pub fn render_example(spec: &DatasetSpec, split: Split, index: usize, corrupt: bool) -> Example {
    let s = spec.image_size;
    let c = spec.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream_id(split, index));

    let mut img = vec![0f64; s * s * 3];
    let mut label = vec![0u8; s * s];

    let bg: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.55));
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp: f64 = rng.gen_range(0.0..0.15);
    let (dx, dy) = (angle.cos(), angle.sin());
    for y in 0..s {
        for x in 0..s {
            let t = ((x as f64 / s as f64 - 0.5) * dx + (y as f64 / s as f64 - 0.5) * dy) * 2.0 * amp;
            for ch in 0..3 {
                img[(y * s + x) * 3 + ch] = bg[ch] + t;
            }
        }
    }

    let n_shapes = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let sf = s as f64;
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..c);
        let base = class_color(class);
        let color: [f64; 3] =
            std::array::from_fn(|ch| base[ch] + rng.gen_range(-SHAPE_COLOR_JITTER..SHAPE_COLOR_JITTER));
        let kind = rng.gen_range(0..3);
        let inside: Box<dyn Fn(f64, f64) -> bool> = match kind {
            0 => {
                let w = rng.gen_range(0.15..0.45) * sf;
                let h = rng.gen_range(0.15..0.45) * sf;
                let x0 = rng.gen_range(0.0..sf - w);
                let y0 = rng.gen_range(0.0..sf - h);
                Box::new(move |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h)
            }
            1 => {
                let r = rng.gen_range(0.08..0.2) * sf;
                let cx = rng.gen_range(r..sf - r);
                let cy = rng.gen_range(r..sf - r);
                Box::new(move |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r * r)
            }
            _ => {
                let thick = rng.gen_range(0.05..0.1) * sf;
                let len = rng.gen_range(0.5..0.9) * sf;
                let a = rng.gen_range(0.0..sf - len);
                let b = rng.gen_range(0.0..sf - thick);
                if rng.gen_bool(0.5) {
                    Box::new(move |x, y| x >= a && x < a + len && y >= b && y < b + thick)
                } else {
                    Box::new(move |x, y| y >= a && y < a + len && x >= b && x < b + thick)
                }
            }
        };
        for y in 0..s {
            for x in 0..s {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    label[y * s + x] = class as u8;
                    img[(y * s + x) * 3..(y * s + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }

    let pixel_noise = Normal::new(0.0, TARGET_PIXEL_NOISE).expect("valid sigma");
    for v in img.iter_mut() {
        *v += pixel_noise.sample(&mut rng);
    }

    let mut mask = None;
    if split == Split::Source {
        let j = spec.color_jitter;
        let gain: [f64; 3] = std::array::from_fn(|_| 1.0 + rng.gen_range(-j..=j));
        let offset: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-j / 2.0..=j / 2.0));
        let texture = Normal::new(0.0, spec.texture_sigma).expect("valid sigma");
        for (i, v) in img.iter_mut().enumerate() {
            let ch = i % 3;
            *v = gain[ch] * *v + offset[ch] + texture.sample(&mut rng);
        }

        let mut m = vec![0u8; s * s];
        if corrupt {
            let area = rng.gen_range(spec.corruption_min_area..=spec.corruption_max_area) * sf * sf;
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let w = ((area * aspect).sqrt().round() as usize).clamp(1, s);
            let h = ((area / w as f64).round() as usize).clamp(1, s);
            let x0 = rng.gen_range(0..=s - w);
            let y0 = rng.gen_range(0..=s - h);
            let region_class = rng.gen_range(0..c) as u8;
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    m[y * s + x] = 255;
                    label[y * s + x] = match spec.corruption_mode {
                        CorruptionMode::Pixel => rng.gen_range(0..c) as u8,
                        CorruptionMode::Region => region_class,
                    };
                }
            }
        }
        mask = Some(m);
    }

    let image = img
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Example { image, label, mask }
}

fn write_png_rgb(path: &Path, s: usize, data: Vec<u8>) -> Result<()> {
    let img = RgbImage::from_raw(s as u32, s as u32, data).expect("buffer matches size");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

pub(crate) fn write_png_gray(path: &Path, w: usize, h: usize, data: Vec<u8>) -> Result<()> {
    let img = GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches size");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Renders every split into `out_dir` and writes `manifest.json`.
pub fn generate(spec: &DatasetSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    let corrupted = corrupted_indices(spec);
    let mkdir = |p: PathBuf| fs::create_dir_all(&p).map_err(|e| Error::io(&p, e));
    for split in Split::ALL {
        mkdir(out_dir.join(split.dir_name()).join("images"))?;
        mkdir(out_dir.join(split.dir_name()).join("labels"))?;
    }
    mkdir(out_dir.join("meta").join("corruption_masks"))?;

    let mut entries = Vec::new();
    for split in Split::ALL {
        for i in 0..spec.count(split) {
            let ex = render_example(spec, split, i, split == Split::Source && corrupted.contains(&i));
            let name = format!("{i:06}.png");
            let image = PathBuf::from(split.dir_name()).join("images").join(&name);
            let label = PathBuf::from(split.dir_name()).join("labels").join(&name);
            write_png_rgb(&out_dir.join(&image), spec.image_size, ex.image)?;
            write_png_gray(&out_dir.join(&label), spec.image_size, spec.image_size, ex.label)?;
            let corruption_mask = match ex.mask {
                Some(m) => {
                    let p = PathBuf::from("meta").join("corruption_masks").join(&name);
                    write_png_gray(&out_dir.join(&p), spec.image_size, spec.image_size, m)?;
                    Some(p)
                }
                None => None,
            };
            entries.push(ManifestEntry {
                split,
                domain: split.domain(),
                index: i,
                image,
                label,
                corruption_mask,
            });
        }
    }
    let manifest = Manifest {
        spec: spec.clone(),
        seed: spec.seed,
        entries,
    };
    let path = out_dir.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            image_size: 32,
            n_source: 20,
            n_target_train: 4,
            n_target_val: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn rho_zero_gives_empty_masks() {
        let spec = DatasetSpec {
            corruption_rho: 0.0,
            ..small()
        };
        assert!(corrupted_indices(&spec).is_empty());
        for i in 0..spec.n_source {
            let ex = render_example(&spec, Split::Source, i, false);
            assert!(ex.mask.unwrap().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn half_of_four_hundred_are_poisoned() {
        let spec = DatasetSpec::default();
        let set = corrupted_indices(&spec);
        assert_eq!(set.len(), 200);
        let nonempty = (0..spec.n_source)
            .filter(|i| {
                render_example(&spec, Split::Source, *i, set.contains(i))
                    .mask
                    .unwrap()
                    .iter()
                    .any(|&v| v != 0)
            })
            .count();
        assert_eq!(nonempty, 200);
    }

    #[test]
    fn corruption_area_within_bounds() {
        let spec = small();
        for i in 0..spec.n_source {
            let m = render_example(&spec, Split::Source, i, true).mask.unwrap();
            let frac = m.iter().filter(|&&v| v != 0).count() as f64 / (32.0 * 32.0);
            assert!((0.07..=0.45).contains(&frac), "area fraction {frac}");
        }
    }

    #[test]
    fn labels_in_range_and_target_has_no_mask() {
        let spec = small();
        for split in Split::ALL {
            for i in 0..spec.count(split) {
                let ex = render_example(&spec, split, i, split == Split::Source);
                assert!(ex.label.iter().all(|&v| (v as usize) < spec.num_classes));
                assert_eq!(ex.mask.is_some(), split == Split::Source);
            }
        }
    }

    #[test]
    fn invalid_rho_rejected() {
        let spec = DatasetSpec {
            corruption_rho: 1.5,
            ..small()
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(generate(&spec, dir.path()), Err(Error::InvalidConfig(_))));
    }
}
