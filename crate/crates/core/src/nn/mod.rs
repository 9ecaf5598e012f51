//! Networks, optimizer and checkpoints.

mod adam;
mod checkpoint;
mod params;
mod seg;
mod weight;

pub use adam::{AdamConfig, Decay, OptimizerState};
pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_MAGIC};
pub use params::{add_conv, Conv, Init, ParamEntry, ParamGroup, Params};
pub use seg::{Domain, SegConfig, SegNet, NUM_BLOCKS};
pub use weight::{WeightConfig, WeightMode, WeightNet};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Builds a segmentation network (see [`SegNet::new`]).
pub fn build_seg_net<T: Scalar>(
    num_classes: usize,
    split_at: usize,
    widths: &[usize],
    seed: u64,
) -> Result<SegNet<T>> {
    SegNet::new(
        SegConfig {
            num_classes,
            split_at,
            widths: widths.to_vec(),
            zero_score_init: false,
        },
        seed,
    )
}

/// Evaluation-mode forward on plain tensors; returns logits.
pub fn seg_forward<T: Scalar>(net: &SegNet<T>, image: &Tensor<T>, domain: Domain) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p = net.params.bind_frozen(&g);
    Ok(net.forward(&p, g.constant(image.clone()), domain)?.value())
}

/// Evaluation-mode weight map on plain tensors.
pub fn weight_forward<T: Scalar>(
    wnet: &WeightNet<T>,
    image: &Tensor<T>,
    label_onehot: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let p: Vec<Var<'_, T>> = wnet.params.bind_frozen(&g);
    Ok(wnet
        .forward(&p, g.constant(image.clone()), g.constant(label_onehot.clone()))?
        .value())
}
