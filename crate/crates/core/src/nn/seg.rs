use serde::{Deserialize, Serialize};

use super::params::{add_conv, Conv, Init, ParamGroup, Params};
use crate::Error;
use crate::autodiff::Var;
use crate::tensor::Scalar;

pub const NUM_BLOCKS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub num_classes: usize,
    /// Encoder blocks `1..=split_at` get one copy per domain. With
    /// `split_at == 5` the decoder is per-domain too and nothing is shared.
    pub split_at: usize,
    pub widths: Vec<usize>,
    /// Zero weights and biases on the three score layers (all logits start at 0).
    pub zero_score_init: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            num_classes: 5,
            split_at: 1,
            widths: vec![8, 16, 32, 32, 32],
            zero_score_init: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Path {
    blocks: Vec<[Conv; 2]>,
    score5: Conv,
    score4: Conv,
    score3: Conv,
    up5: Conv,
    up4: Conv,
    refine: [Conv; 3],
}

/// FCN-8-topology segmentation network: five conv-conv-pool encoder blocks,
/// score layers on blocks 3, 4 and 5 fused coarse-to-fine, then three
/// nearest-upsample + conv stages back to input resolution.
#[derive(Clone, Debug)]
pub struct SegNet<T: Scalar> {
    pub config: SegConfig,
    pub params: Params<T>,
    source: Path,
    target: Path,
}

fn domain_tag(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Shared => "shared",
        ParamGroup::SourceHead => "source",
        ParamGroup::TargetHead => "target",
    }
}

impl<T: Scalar> SegNet<T> {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self, Error> {
        if config.split_at > NUM_BLOCKS {
            return Err(Error::InvalidConfig(format!(
                "split_at must be in 0..={NUM_BLOCKS}, got {}",
                config.split_at
            )));
        }
        if config.widths.len() != NUM_BLOCKS || config.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "widths must list {NUM_BLOCKS} positive channel counts, got {:?}",
                config.widths
            )));
        }
        if config.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        let mut params = Params::new();
        let c = config.num_classes;
        let w = &config.widths;

        let block = |params: &mut Params<T>, i: usize, group: ParamGroup| -> [Conv; 2] {
            let in_c = if i == 0 { 3 } else { w[i - 1] };
            let tag = domain_tag(group);
            let key1 = format!("enc{}.conv1", i + 1);
            let key2 = format!("enc{}.conv2", i + 1);
            [
                add_conv(
                    params,
                    &format!("enc{}.{tag}.conv1", i + 1),
                    &key1,
                    group,
                    in_c,
                    w[i],
                    3,
                    1,
                    Init::KaimingUniform,
                    seed,
                ),
                add_conv(
                    params,
                    &format!("enc{}.{tag}.conv2", i + 1),
                    &key2,
                    group,
                    w[i],
                    w[i],
                    3,
                    1,
                    Init::KaimingUniform,
                    seed,
                ),
            ]
        };

        let mut src_blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut tgt_blocks = Vec::with_capacity(NUM_BLOCKS);
        for i in 0..NUM_BLOCKS {
            if i < config.split_at {
                src_blocks.push(block(&mut params, i, ParamGroup::SourceHead));
                tgt_blocks.push(block(&mut params, i, ParamGroup::TargetHead));
            } else {
                let b = block(&mut params, i, ParamGroup::Shared);
                src_blocks.push(b);
                tgt_blocks.push(b);
            }
        }

        let score_init = if config.zero_score_init {
            Init::Zero
        } else {
            Init::KaimingUniform
        };
        let decoder = |params: &mut Params<T>, group: ParamGroup| {
            let tag = domain_tag(group);
            let mut conv = |name: &str, in_c: usize, init: Init| {
                add_conv(
                    params,
                    &format!("dec.{tag}.{name}"),
                    &format!("dec.{name}"),
                    group,
                    in_c,
                    c,
                    3,
                    1,
                    init,
                    seed,
                )
            };
            let score5 = conv("score5", w[4], score_init);
            let score4 = conv("score4", w[3], score_init);
            let score3 = conv("score3", w[2], score_init);
            let up5 = conv("up5", c, Init::KaimingUniform);
            let up4 = conv("up4", c, Init::KaimingUniform);
            let refine = [
                conv("refine1", c, Init::KaimingUniform),
                conv("refine2", c, Init::KaimingUniform),
                conv("refine3", c, Init::KaimingUniform),
            ];
            (score5, score4, score3, up5, up4, refine)
        };

        let make_path = |blocks: Vec<[Conv; 2]>, d: (Conv, Conv, Conv, Conv, Conv, [Conv; 3])| Path {
            blocks,
            score5: d.0,
            score4: d.1,
            score3: d.2,
            up5: d.3,
            up4: d.4,
            refine: d.5,
        };
        let (source, target) = if config.split_at == NUM_BLOCKS {
            let ds = decoder(&mut params, ParamGroup::SourceHead);
            let dt = decoder(&mut params, ParamGroup::TargetHead);
            (make_path(src_blocks, ds), make_path(tgt_blocks, dt))
        } else {
            let d = decoder(&mut params, ParamGroup::Shared);
            (make_path(src_blocks, d), make_path(tgt_blocks, d))
        };

        Ok(SegNet {
            config,
            params,
            source,
            target,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Indices of the parameters a source-domain loss can reach
    /// (source head plus shared blocks).
    pub fn source_indices(&self) -> Vec<usize> {
        self.params
            .indices_in(&[ParamGroup::SourceHead, ParamGroup::Shared])
    }

    pub fn target_indices(&self) -> Vec<usize> {
        self.params
            .indices_in(&[ParamGroup::TargetHead, ParamGroup::Shared])
    }

    /// Logits `[B, C, H, W]` for images `[B, 3, H, W]` through the given
    /// domain's path. `bound` holds one graph variable per parameter, in
    /// parameter order; it need not contain the stored values (the meta step
    /// binds updated parameters here).
    pub fn forward<'g>(
        &self,
        bound: &[Var<'g, T>],
        image: Var<'g, T>,
        domain: Domain,
    ) -> Result<Var<'g, T>, Error> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::InvalidInput(format!(
                "segmentation input must be [B, 3, H, W], got {s:?}"
            )));
        }
        if s[2] == 0 || s[3] == 0 {
            return Err(Error::InvalidInput(format!(
                "segmentation input must have positive height and width, got {}x{}",
                s[2], s[3]
            )));
        }
        if bound.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                bound.len()
            )));
        }
        let path = match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        };
        let mut x = image;
        let mut pools = Vec::with_capacity(NUM_BLOCKS);
        for [c1, c2] in &path.blocks {
            x = c1.forward(bound, x)?.relu()?;
            x = c2.forward(bound, x)?.relu()?;
            x = x.maxpool2()?;
            pools.push(x);
        }
        // Every upsampled map is cropped to the size of the map it joins;
        // ceil-mode pooling makes it at most one pixel larger.
        let up_to = |v: Var<'g, T>, like: &[usize]| v.upsample2()?.crop(like[2], like[3]);
        let size = |i: usize| if i == 0 { s.clone() } else { pools[i - 1].shape() };
        let s5 = path.score5.forward(bound, pools[4])?;
        let f4 = path
            .up5
            .forward(bound, up_to(s5, &pools[3].shape())?)?
            .add(path.score4.forward(bound, pools[3])?)?;
        let mut y = path
            .up4
            .forward(bound, up_to(f4, &pools[2].shape())?)?
            .add(path.score3.forward(bound, pools[2])?)?;
        for (k, conv) in path.refine.iter().enumerate() {
            y = conv.forward(bound, up_to(y, &size(2 - k))?)?;
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GradOptions, Graph};
    use crate::tensor::Tensor;

    fn image(b: usize, h: usize, seed: u64) -> Tensor<f64> {
        let mut s = seed;
        let data: Vec<f64> = (0..b * 3 * h * h)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Tensor::new(vec![b, 3, h, h], data)
    }

    fn small(split_at: usize) -> SegConfig {
        SegConfig {
            num_classes: 3,
            split_at,
            widths: vec![2, 3, 3, 4, 4],
            zero_score_init: false,
        }
    }

    #[test]
    fn output_shape_contract() {
        let net = SegNet::<f32>::new(SegConfig::default(), 0).unwrap();
        let g = Graph::new();
        let p = net.params.bind_frozen(&g);
        let x = g.constant(image(1, 64, 1).cast());
        let y = net.forward(&p, x, Domain::Target).unwrap();
        assert_eq!(y.shape(), vec![1, 5, 64, 64]);
    }

    #[test]
    fn rejects_bad_split_and_sizes() {
        let cfg = SegConfig {
            split_at: 6,
            ..SegConfig::default()
        };
        assert!(matches!(SegNet::<f32>::new(cfg, 0), Err(Error::InvalidConfig(_))));
        let net = SegNet::<f64>::new(small(1), 0).unwrap();
        let g = Graph::new();
        let p = net.params.bind_frozen(&g);
        let x = g.constant(image(1, 48, 1));
        assert!(matches!(net.forward(&p[1..], x, Domain::Source), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn any_positive_size_round_trips() {
        let net = SegNet::<f64>::new(small(1), 0).unwrap();
        let g = Graph::new();
        let p = net.params.bind_frozen(&g);
        for (h, w) in [(8, 8), (13, 7), (48, 48), (1, 1)] {
            let x = g.constant(Tensor::zeros(&[1, 3, h, w]));
            let y = net.forward(&p, x, Domain::Target).unwrap();
            assert_eq!(y.shape(), vec![1, net.num_classes(), h, w]);
        }
    }

    #[test]
    fn full_sharing_gives_identical_domain_outputs() {
        let net = SegNet::<f64>::new(small(0), 4).unwrap();
        let g = Graph::new();
        let p = net.params.bind_frozen(&g);
        let x = g.constant(image(1, 32, 2));
        let a = net.forward(&p, x, Domain::Source).unwrap().value();
        let b = net.forward(&p, x, Domain::Target).unwrap().value();
        assert!(a.bit_eq(&b));
        assert!(net
            .params
            .entries()
            .iter()
            .all(|e| e.group == ParamGroup::Shared));
    }

    #[test]
    fn full_split_shares_nothing() {
        let net = SegNet::<f64>::new(small(5), 4).unwrap();
        assert!(net
            .params
            .entries()
            .iter()
            .all(|e| e.group != ParamGroup::Shared));
        // per-domain copies start identical
        let g = Graph::new();
        let p = net.params.bind_frozen(&g);
        let x = g.constant(image(1, 32, 3));
        let a = net.forward(&p, x, Domain::Source).unwrap().value();
        let b = net.forward(&p, x, Domain::Target).unwrap().value();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SegNet::<f32>::new(SegConfig::default(), 11).unwrap();
        let b = SegNet::<f32>::new(SegConfig::default(), 11).unwrap();
        let c = SegNet::<f32>::new(SegConfig::default(), 12).unwrap();
        assert!(a.params.bit_eq(&b.params));
        assert!(!a.params.bit_eq(&c.params));
    }

    #[test]
    fn target_path_initialisation_independent_of_split() {
        let a = SegNet::<f64>::new(small(1), 5).unwrap();
        let b = SegNet::<f64>::new(small(5), 5).unwrap();
        let g = Graph::new();
        let x = g.constant(image(1, 32, 9));
        let pa = a.params.bind_frozen(&g);
        let pb = b.params.bind_frozen(&g);
        let ya = a.forward(&pa, x, Domain::Target).unwrap().value();
        let yb = b.forward(&pb, x, Domain::Target).unwrap().value();
        assert!(ya.bit_eq(&yb));
    }

    #[test]
    fn zero_score_layers_give_zero_logits() {
        let cfg = SegConfig {
            zero_score_init: true,
            ..small(1)
        };
        let net = SegNet::<f64>::new(cfg, 0).unwrap();
        let g = Graph::new();
        let p = net.params.bind_frozen(&g);
        let y = net
            .forward(&p, g.constant(image(1, 32, 4)), Domain::Source)
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn source_loss_reaches_no_target_head_parameter() {
        let net = SegNet::<f64>::new(small(2), 0).unwrap();
        let g = Graph::new();
        let p = net.params.bind(&g);
        let y = net
            .forward(&p, g.constant(image(1, 32, 5)), Domain::Source)
            .unwrap();
        let loss = y.sum().unwrap();
        let d = g.grad(loss, &p, GradOptions::default()).unwrap();
        for (i, e) in net.params.entries().iter().enumerate() {
            assert_eq!(d.unreachable[i], e.group == ParamGroup::TargetHead, "{}", e.name);
        }
    }
}
