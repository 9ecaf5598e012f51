// Finite-difference certification of the meta-gradient d loss_t / d phi.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{finite_diff, CheckReport, DEFAULT_STEP, META_TOLERANCE};
use crate::autodiff::{GradOptions, Graph};
use crate::data::{render_example, Batch, DatasetSpec, Split};
use crate::error::Result;
use crate::losses::LabelMap;
use crate::meta::meta_objective;
use crate::nn::{Params, SegConfig, SegNet, WeightConfig, WeightMode, WeightNet};
use crate::tensor::Tensor;

/// Smallest configuration that exercises the full meta step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub seg_widths: Vec<usize>,
    pub split_at: usize,
    pub weight_width: usize,
    pub weight_mode: WeightMode,
    /// A large inner step keeps meta-gradient entries well above the
    /// round-off floor of the central differences.
    pub alpha: f64,
    /// Biases of both networks are redrawn uniformly from this range.
    pub bias_range: (f64, f64),
    pub step: f64,
    pub tolerance: f64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            image_size: 8,
            num_classes: 2,
            seg_widths: vec![2; 5],
            split_at: 1,
            weight_width: 1,
            weight_mode: WeightMode::Single,
            alpha: 2.0,
            bias_range: (0.1, 0.4),
            step: DEFAULT_STEP,
            tolerance: META_TOLERANCE,
        }
    }
}

struct Setup {
    seg: SegNet<f64>,
    wnet: WeightNet<f64>,
    batch_s: Batch<f64>,
    batch_t: Batch<f64>,
}

fn batch(spec: &DatasetSpec, split: Split, index: usize) -> Batch<f64> {
    let ex = render_example(spec, split, index, split == Split::Source);
    let s = spec.image_size;
    let hw = s * s;
    let image: Vec<f64> = (0..3)
        .flat_map(|ch| (0..hw).map(move |p| (ch, p)))
        .map(|(ch, p)| ex.image[p * 3 + ch] as f64 / 255.0)
        .collect();
    Batch {
        image: Tensor::new(vec![1, 3, s, s], image),
        label: LabelMap::new([1, s, s], ex.label),
        domain: split.domain(),
        indices: vec![index],
    }
}

// Biases start at zero, so a ReLU whose whole input window is zero sits
// exactly on its kink, where central differences average the two one-sided
// slopes. Positive biases keep most units active and away from the kink.
fn jitter_biases(params: &mut Params<f64>, range: (f64, f64), rng: &mut ChaCha8Rng) {
    for i in 0..params.len() {
        if params.entries()[i].name.ends_with(".bias") {
            let t = params.get(i);
            let data = t.data().iter().map(|_| rng.gen_range(range.0..range.1)).collect();
            params.set(i, Tensor::new(t.shape().to_vec(), data));
        }
    }
}

fn setup(seed: u64, cfg: &TinyConfig) -> Result<Setup> {
    let mut seg = SegNet::new(
        SegConfig {
            num_classes: cfg.num_classes,
            split_at: cfg.split_at,
            widths: cfg.seg_widths.clone(),
            zero_score_init: false,
        },
        seed,
    )?;
    let mut wnet = WeightNet::new(
        WeightConfig {
            num_classes: cfg.num_classes,
            mode: cfg.weight_mode,
            width: cfg.weight_width,
            width_mult: 1,
            zero_final: false,
            fixed_output: None,
        },
        seed.wrapping_add(1000),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB1A5);
    jitter_biases(&mut seg.params, cfg.bias_range, &mut rng);
    jitter_biases(&mut wnet.params, cfg.bias_range, &mut rng);
    let spec = DatasetSpec {
        image_size: cfg.image_size,
        num_classes: cfg.num_classes,
        seed,
        ..DatasetSpec::default()
    };
    Ok(Setup {
        seg,
        wnet,
        batch_s: batch(&spec, Split::Source, 0),
        batch_t: batch(&spec, Split::TargetTrain, 0),
    })
}

fn loss_t_at(s: &Setup, phi_flat: &[f64], alpha: f64) -> f64 {
    let mut wnet = s.wnet.clone();
    wnet.params.assign_flat(phi_flat);
    let g = Graph::new();
    let phi = wnet.params.bind_frozen(&g);
    let (_, lt, _) = meta_objective(&g, &s.seg, &wnet, &phi, &s.batch_s, &s.batch_t, alpha).expect("meta objective");
    lt.item()
}

fn analytic(s: &Setup, alpha: f64) -> Result<Vec<f64>> {
    let g = Graph::new();
    let phi = s.wnet.params.bind(&g);
    let (_, lt, _) = meta_objective(&g, &s.seg, &s.wnet, &phi, &s.batch_s, &s.batch_t, alpha)?;
    if !lt.requires_grad() {
        return Ok(vec![0.0; s.wnet.params.num_scalars()]);
    }
    let d = g.grad(lt, &phi, GradOptions::default())?;
    Ok(d.values().iter().flat_map(|t| t.to_vec()).collect())
}

/// The engine's meta-gradient over every weighting-network scalar.
pub fn meta_gradient(seed: u64, cfg: &TinyConfig) -> Result<Vec<f64>> {
    analytic(&setup(seed, cfg)?, cfg.alpha)
}

pub fn meta_gradient_norm(seed: u64, cfg: &TinyConfig) -> Result<f64> {
    Ok(meta_gradient(seed, cfg)?.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Compares the engine's meta-gradient with central differences of the
/// meta objective over every weighting-network parameter.
pub fn check_meta_gradient(seed: u64, cfg: &TinyConfig) -> Result<CheckReport> {
    let s = setup(seed, cfg)?;
    let a = analytic(&s, cfg.alpha)?;
    let phi0 = s.wnet.params.flatten();
    let numeric = finite_diff(|p| loss_t_at(&s, p, cfg.alpha), &phi0, cfg.step);
    Ok(CheckReport::compare(
        format!("meta_gradient/seed{seed}"),
        &a,
        &numeric,
        cfg.step,
        cfg.tolerance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tiny_config_passes() {
        let r = check_meta_gradient(0, &TinyConfig::default()).unwrap();
        assert!(r.pass, "{}", r.summary());
    }

    #[test]
    fn pass_is_stable_across_seeds_and_steps() {
        for seed in 0..6 {
            for step in [1e-4, 1e-5] {
                let cfg = TinyConfig {
                    step,
                    ..TinyConfig::default()
                };
                let r = check_meta_gradient(seed, &cfg).unwrap();
                assert!(r.pass, "h={step}: {}", r.summary());
            }
            // At h=1e-6 central differences carry about eps * |loss| / h of
            // round-off, which is large relative to the smallest entries.
            let r = check_meta_gradient(
                seed,
                &TinyConfig {
                    step: 1e-6,
                    ..TinyConfig::default()
                },
            )
            .unwrap();
            assert!(r.max_abs_err < 5e-9, "seed {seed}: abs err {:.2e}", r.max_abs_err);
        }
    }

    #[test]
    fn zero_alpha_gives_zero_meta_gradient() {
        let cfg = TinyConfig {
            alpha: 0.0,
            ..TinyConfig::default()
        };
        let r = check_meta_gradient(1, &cfg).unwrap();
        assert!(r.pass);
        assert!(r.entries.iter().all(|e| e.numeric.abs() < 1e-8 && e.analytic.abs() < 1e-8));
    }

    #[test]
    fn meta_gradient_is_first_order_in_alpha() {
        let at = |alpha| {
            meta_gradient_norm(
                0,
                &TinyConfig {
                    alpha,
                    ..TinyConfig::default()
                },
            )
            .unwrap()
        };
        let ratio = at(2e-3) / at(1e-3);
        assert!((1.8..=2.2).contains(&ratio), "ratio {ratio}");
    }
}
