use serde::{Deserialize, Serialize};

use super::params::{add_conv, Conv, Init, ParamGroup, Params};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};


/// Number of output channels of the weighting network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One weight per pixel, shared by all classes.
    Single,
    /// One weight per pixel and class; the loss uses the ground-truth channel.
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub num_classes: usize,
    pub mode: WeightMode,
    /// Channels at full resolution.
    pub width: usize,
    /// Channel growth per down stage, capped at `4 * width`.
    pub width_mult: usize,
    /// Zero the final conv so every initial weight is exactly 0.5.
    pub zero_final: bool,
    /// Replace the network output with this constant (no dependence on φ).
    pub fixed_output: Option<f64>,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            num_classes: 5,
            mode: WeightMode::Single,
            width: 8,
            width_mult: 2,
            zero_final: true,
            fixed_output: None,
        }
    }
}

impl WeightConfig {
    pub fn out_channels(&self) -> usize {
        match self.mode {
            WeightMode::Single => 1,
            WeightMode::PerClass => self.num_classes,
        }
    }

    fn stage_widths(&self) -> [usize; 4] {
        let cap = 4 * self.width;
        let mut w = [self.width; 4];
        for k in 1..4 {
            w[k] = (w[k - 1] * self.width_mult).min(cap);
        }
        w
    }
}

/// U-Net weighting network: concat(image, one-hot label) -> sigmoid weight map.
#[derive(Clone, Debug)]
pub struct WeightNet<T: Scalar> {
    pub config: WeightConfig,
    pub params: Params<T>,
    enc0: Conv,
    down: [Conv; 3],
    up: [Conv; 3],
    head: Conv,
}

impl<T: Scalar> WeightNet<T> {
    pub fn new(config: WeightConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 || config.width == 0 || config.width_mult == 0 {
            return Err(Error::InvalidConfig(format!(
                "weighting network needs num_classes >= 2 and positive widths, got {config:?}"
            )));
        }
        if let Some(v) = config.fixed_output {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "fixed weighting output must lie in [0, 1], got {v}"
                )));
            }
        }
        let w = config.stage_widths();
        let c = config.num_classes;
        let mut params = Params::new();
        let g = ParamGroup::Shared;
        let conv = |params: &mut Params<T>, name: &str, i: usize, o: usize, s: usize, init: Init| {
            add_conv(params, name, name, g, i, o, 3, s, init, seed)
        };
        let k = Init::KaimingUniform;
        let enc0 = conv(&mut params, "wnet.enc0", 3 + c, w[0], 1, k);
        let down = [
            conv(&mut params, "wnet.down1", w[0], w[1], 2, k),
            conv(&mut params, "wnet.down2", w[1], w[2], 2, k),
            conv(&mut params, "wnet.down3", w[2], w[3], 2, k),
        ];
        let up = [
            conv(&mut params, "wnet.up3", w[3] + w[2], w[2], 1, k),
            conv(&mut params, "wnet.up2", w[2] + w[1], w[1], 1, k),
            conv(&mut params, "wnet.up1", w[1] + w[0], w[0], 1, k),
        ];
        let head_init = if config.zero_final { Init::Zero } else { k };
        let head = conv(&mut params, "wnet.head", w[0], config.out_channels(), 1, head_init);
        Ok(WeightNet {
            config,
            params,
            enc0,
            down,
            up,
            head,
        })
    }

    /// Per-class network whose every output channel copies the head of a
    /// single-channel network; its output equals `single`'s broadcast over
    /// classes.
    pub fn per_class_from_single(single: &WeightNet<T>) -> Result<Self> {
        if single.config.mode != WeightMode::Single {
            return Err(Error::InvalidConfig("source network must be single-channel".into()));
        }
        let config = WeightConfig {
            mode: WeightMode::PerClass,
            ..single.config.clone()
        };
        let c = config.num_classes;
        let mut net = WeightNet::new(config, 0)?;
        for (i, e) in single.params.entries().iter().enumerate() {
            if i == single.head.weight || i == single.head.bias {
                let rep: Vec<T> = (0..c).flat_map(|_| e.value.data().iter().copied()).collect();
                let mut shape = e.value.shape().to_vec();
                shape[0] = c;
                net.params.set(i, Tensor::new(shape, rep));
            } else {
                net.params.set(i, e.value.clone());
            }
        }
        Ok(net)
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels()
    }

    /// Weight map `[B, m, H, W]` with every value in (0, 1).
    pub fn forward<'g>(&self, bound: &[Var<'g, T>], image: Var<'g, T>, onehot: Var<'g, T>) -> Result<Var<'g, T>> {
        let (is, ls) = (image.shape(), onehot.shape());
        let c = self.config.num_classes;
        if is.len() != 4 || is[1] != 3 {
            return Err(Error::InvalidInput(format!(
                "weighting input image must be [B, 3, H, W], got {is:?}"
            )));
        }
        if ls.len() != 4 || ls[1] != c || ls[0] != is[0] || ls[2..] != is[2..] {
            return Err(Error::InvalidInput(format!(
                "one-hot label must be [{}, {c}, {}, {}], got {ls:?}",
                is[0], is[2], is[3]
            )));
        }
        if is[2] == 0 || is[3] == 0 {
            return Err(Error::InvalidInput(format!(
                "weighting input must have positive height and width, got {}x{}",
                is[2], is[3]
            )));
        }
        if bound.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} bound parameters, got {}",
                self.params.len(),
                bound.len()
            )));
        }
        if let Some(v) = self.config.fixed_output {
            let shape = [is[0], self.out_channels(), is[2], is[3]];
            return Ok(image.graph().constant(Tensor::full(&shape, T::from_f64(v))));
        }
        // Stride-2 stages round up, so upsampled maps are cropped to the skip.
        let join = |deep: Var<'g, T>, skip: Var<'g, T>| -> Result<Var<'g, T>> {
            let s = skip.shape();
            Ok(Var::concat_channels(&[deep.upsample2()?.crop(s[2], s[3])?, skip])?)
        };
        let x = Var::concat_channels(&[image, onehot])?;
        let e0 = self.enc0.forward(bound, x)?.relu()?;
        let d1 = self.down[0].forward(bound, e0)?.relu()?;
        let d2 = self.down[1].forward(bound, d1)?.relu()?;
        let d3 = self.down[2].forward(bound, d2)?.relu()?;
        let u3 = self.up[0]
            .forward(bound, join(d3, d2)?)?
            .relu()?;
        let u2 = self.up[1]
            .forward(bound, join(u3, d1)?)?
            .relu()?;
        let u1 = self.up[2]
            .forward(bound, join(u2, e0)?)?
            .relu()?;
        Ok(self.head.forward(bound, u1)?.sigmoid()?)
    }
}
