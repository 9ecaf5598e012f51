//! Training procedures and the outer schedule.
//!
//! A MetaPix run has three kinds of step:
//!
//! 1. [`pretrain_step`]: joint training of the segmentation network on the
//!    unweighted source loss (source path) plus the target loss (target
//!    path), `N1` times.
//! 2. [`meta_step`]: the weighting network produces a weight map for a
//!    source batch; the weighted source loss is differentiated with respect
//!    to the source-path parameters with the graph kept; one plain
//!    gradient-descent step of size `alpha` gives updated parameters whose
//!    target loss is then differentiated, through the first gradient, with
//!    respect to the weighting network. Only the weighting network moves.
//! 3. [`weighted_train_step`]: the weight map is computed, detached, and
//!    scales the source loss for an ordinary optimizer step on the
//!    segmentation network.
//!
//! [`run_schedule`] runs `N1` pretraining steps, then `G` generations of
//! `N2` meta steps followed by `N3` weighted steps, evaluating on the target
//! validation split after pretraining and after each generation. The
//! weighting network is not needed for evaluation and can be thrown away
//! after training.

mod schedule;
mod steps;

pub use schedule::{run_schedule, EvalRecord, RunMode, RunOutput, RunSummary, Schedule, Slot, TrainData, Trainer};
pub use steps::{meta_step, pretrain_step, target_step, weighted_train_step, Phase, StepRecord};
pub(crate) use steps::meta_objective;
