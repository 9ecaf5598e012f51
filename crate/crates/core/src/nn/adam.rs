use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::params::Params;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Decay {
    None,
    /// `lr(t) = base_lr * (1 - t / total_steps)^power`, clamped at zero.
    Polynomial { power: f64, total_steps: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: Decay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: Decay::None,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.decay {
            Decay::None => self.base_lr,
            Decay::Polynomial { power, total_steps } => {
                if total_steps == 0 {
                    return self.base_lr;
                }
                let frac = 1.0 - (t as f64 / total_steps as f64);
                self.base_lr * frac.max(0.0).powf(power)
            }
        }
    }
}

/// Adam moments for every parameter of one [`Params`] list.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub config: AdamConfig,
    /// Successful `step` calls so far; drives the learning-rate schedule.
    pub t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    /// Per-parameter update counts for bias correction (a parameter with no
    /// gradient in a step keeps its moments and count).
    counts: Vec<u64>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &Params<T>) -> Self {
        let zeros = |p: &Params<T>| -> Vec<Tensor<T>> {
            p.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect()
        };
        OptimizerState {
            config,
            t: 0,
            m: zeros(params),
            v: zeros(params),
            counts: vec![0; params.len()],
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.t)
    }

    /// One Adam update at `lr(t)`. `grads[i] == None` leaves parameter `i`
    /// and its moments untouched. A non-finite gradient rejects the whole
    /// step without changing anything.
    pub fn step(&mut self, params: &mut Params<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidInput(format!(
                "optimizer holds {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.get(i).shape() {
                    return Err(Error::InvalidInput(format!(
                        "gradient for {} has shape {:?}, parameter has {:?}",
                        params.entries()[i].name,
                        g.shape(),
                        params.get(i).shape()
                    )));
                }
                if !g.all_finite() {
                    let name = &params.entries()[i].name;
                    log::warn!("adam: non-finite gradient for {name}, step {} skipped", self.t);
                    return Err(Error::NonFinite {
                        what: format!("gradient for {name}"),
                    });
                }
            }
        }
        let lr = self.lr();
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one, eps) = (T::one(), T::from_f64(c.eps));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.counts[i] += 1;
            let k = self.counts[i] as i32;
            let bc1 = T::from_f64(1.0 - c.beta1.powi(k));
            let bc2 = T::from_f64(1.0 - c.beta2.powi(k));
            let step = T::from_f64(lr);
            let p = params.get(i).data();
            let (m0, v0) = (self.m[i].data(), self.v[i].data());
            let n = p.len();
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            let mut out = Vec::with_capacity(n);
            for j in 0..n {
                let gj = g.data()[j];
                let mj = b1 * m0[j] + (one - b1) * gj;
                let vj = b2 * v0[j] + (one - b2) * gj * gj;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                out.push(p[j] - step * mhat / (vhat.sqrt() + eps));
                m.push(mj);
                v.push(vj);
            }
            let shape = params.get(i).shape().to_vec();
            self.m[i] = Tensor::new(shape.clone(), m);
            self.v[i] = Tensor::new(shape.clone(), v);
            params.set(i, Tensor::new(shape, out));
        }
        self.t += 1;
        Ok(())
    }

    /// Bitwise equality of moments and counters.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.t == other.t
            && self.counts == other.counts
            && self.m.len() == other.m.len()
            && self.m.iter().zip(&other.m).all(|(a, b)| a.bit_eq(b))
            && self.v.iter().zip(&other.v).all(|(a, b)| a.bit_eq(b))
    }

    pub fn save_into(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ckpt.put(&format!("{prefix}.m.{i}"), m);
            ckpt.put(&format!("{prefix}.v.{i}"), v);
        }
        ckpt.meta.insert(
            format!("{prefix}.t"),
            serde_json::json!(self.t),
        );
        ckpt.meta.insert(format!("{prefix}.counts"), serde_json::json!(self.counts));
        ckpt.meta.insert(
            format!("{prefix}.config"),
            serde_json::to_value(self.config).expect("config serialises"),
        );
    }

    pub fn load_from(prefix: &str, ckpt: &Checkpoint, params: &Params<T>) -> Result<Self> {
        let mut st = OptimizerState::new(AdamConfig::default(), params);
        let get = |key: &str| {
            ckpt.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing field {key}")))
        };
        let bad = |key: &str, e: serde_json::Error| Error::Checkpoint(format!("{key}: {e}"));
        let key = format!("{prefix}.t");
        st.t = serde_json::from_value(get(&key)?).map_err(|e| bad(&key, e))?;
        let key = format!("{prefix}.counts");
        st.counts = serde_json::from_value(get(&key)?).map_err(|e| bad(&key, e))?;
        let key = format!("{prefix}.config");
        st.config = serde_json::from_value(get(&key)?).map_err(|e| bad(&key, e))?;
        if st.counts.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{prefix}: {} moment slots for {} parameters",
                st.counts.len(),
                params.len()
            )));
        }
        for i in 0..params.len() {
            st.m[i] = ckpt.get(&format!("{prefix}.m.{i}"))?;
            st.v[i] = ckpt.get(&format!("{prefix}.v.{i}"))?;
            if st.m[i].shape() != params.get(i).shape() || st.v[i].shape() != params.get(i).shape() {
                return Err(Error::Checkpoint(format!("{prefix}: moment {i} has the wrong shape")));
            }
        }
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamGroup;

    fn scalar_params(v: f64) -> Params<f64> {
        let mut p = Params::new();
        p.push("p", ParamGroup::Shared, Tensor::from_f64(&[1], &[v]));
        p
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_params(0.0);
        let mut opt = OptimizerState::new(
            AdamConfig {
                base_lr: 0.1,
                ..AdamConfig::default()
            },
            &p,
        );
        opt.step(&mut p, &[Some(Tensor::from_f64(&[1], &[1.0]))]).unwrap();
        assert!((p.get(0).item() + 0.1).abs() < 1e-6);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = scalar_params(0.37);
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        for _ in 0..10 {
            opt.step(&mut p, &[Some(Tensor::zeros(&[1]))]).unwrap();
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn polynomial_decay_midpoint() {
        let cfg = AdamConfig {
            base_lr: 1e-4,
            decay: Decay::Polynomial {
                power: 0.9,
                total_steps: 1000,
            },
            ..AdamConfig::default()
        };
        let expected = 1e-4 * 0.5f64.powf(0.9);
        assert!((cfg.lr_at(500) - expected).abs() < 1e-15);
        assert!((cfg.lr_at(500) - 5.359e-5).abs() < 1e-8);
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(1000), 0.0);
    }

    #[test]
    fn non_finite_gradient_rejects_step() {
        let mut p = scalar_params(1.0);
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        let r = opt.step(&mut p, &[Some(Tensor::from_f64(&[1], &[f64::NAN]))]);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
        assert_eq!(opt.t, 0);
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn missing_gradient_skips_parameter() {
        let mut p = scalar_params(1.0);
        p.push("q", ParamGroup::Shared, Tensor::from_f64(&[1], &[2.0]));
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        opt.step(&mut p, &[None, Some(Tensor::from_f64(&[1], &[1.0]))]).unwrap();
        assert_eq!(p.get(0).item(), 1.0);
        assert!(p.get(1).item() < 2.0);
    }
}
