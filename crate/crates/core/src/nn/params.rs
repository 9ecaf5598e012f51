use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Which forward paths read a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Shared,
    /// Per-domain copy used only by source-domain forwards.
    SourceHead,
    /// Per-domain copy used only by target-domain forwards.
    TargetHead,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Ordered, named parameter list.
#[derive(Clone, Debug, Default)]
pub struct Params<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, group, value });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].value
    }

    pub fn set(&mut self, i: usize, value: Tensor<T>) {
        assert_eq!(value.shape(), self.entries[i].value.shape());
        self.entries[i].value = value;
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn indices_in(&self, groups: &[ParamGroup]) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| groups.contains(&self.entries[i].group))
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn values(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// All parameters as graph leaves that require grad.
    pub fn bind<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.entries.iter().map(|e| g.param(e.value.clone())).collect()
    }

    /// All parameters as constants (evaluation, frozen networks).
    pub fn bind_frozen<'g>(&self, g: &'g Graph<T>) -> Vec<Var<'g, T>> {
        self.entries.iter().map(|e| g.constant(e.value.clone())).collect()
    }

    /// Flattened copy of every scalar, in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().map(|v| v.as_f64()))
            .collect()
    }

    /// Inverse of [`Params::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars());
        let mut off = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value = Tensor::from_f64(e.value.shape(), &flat[off..off + n]);
            off += n;
        }
    }

    /// Bitwise equality of every parameter value.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.value.bit_eq(&b.value))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::new();
        for e in &self.entries {
            out.push(e.name.clone(), e.group, e.value.cast());
        }
        out
    }
}

/// 3x3-style convolution layer: indices of its weight and bias in a [`Params`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
}

impl Conv {
    pub fn forward<'g, T: Scalar>(
        &self,
        bound: &[Var<'g, T>],
        x: Var<'g, T>,
    ) -> autodiff::Result<Var<'g, T>> {
        x.conv2d(bound[self.weight], self.stride)?
            .bias_add(bound[self.bias])
    }
}

/// How a freshly added conv layer is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming-uniform with fan-in scaling: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    KaimingUniform,
    Zero,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Adds a conv layer named `name`. The random stream is derived from the
/// network seed and `init_key`, so layers sharing a key (per-domain copies)
/// start out identical regardless of how many other layers exist.
#[allow(clippy::too_many_arguments)]
pub fn add_conv<T: Scalar>(
    params: &mut Params<T>,
    name: &str,
    init_key: &str,
    group: ParamGroup,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    init: Init,
    seed: u64,
) -> Conv {
    let shape = [out_c, in_c, k, k];
    let n = out_c * in_c * k * k;
    let w = match init {
        Init::Zero => Tensor::zeros(&shape),
        Init::KaimingUniform => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(fnv1a(init_key));
            let bound = (6.0 / (in_c * k * k) as f64).sqrt();
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::from_f64(&shape, &data)
        }
    };
    let weight = params.push(format!("{name}.weight"), group, w);
    let bias = params.push(format!("{name}.bias"), group, Tensor::zeros(&[out_c]));
    Conv {
        weight,
        bias,
        stride,
    }
}
