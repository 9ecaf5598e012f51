use serde::{Deserialize, Serialize};

use crate::autodiff::{differentiable_step, GradOptions, Graph, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{joint_loss, one_hot, pixel_ce, IGNORE_ID};
use crate::nn::{Domain, OptimizerState, SegNet, WeightNet};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Meta,
    Weighted,
}

/// Losses and weight statistics of one step. `w_*` are `None` when no
/// weight map was involved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss_s: Option<f64>,
    pub loss_t: Option<f64>,
    pub lr: f64,
    pub w_mean: Option<f64>,
    pub w_min: Option<f64>,
    pub w_max: Option<f64>,
    /// The update was rejected (non-finite loss or gradient).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
}

impl StepRecord {
    fn new(phase: Phase, lr: f64) -> Self {
        StepRecord {
            step: 0,
            phase,
            loss_s: None,
            loss_t: None,
            lr,
            w_mean: None,
            w_min: None,
            w_max: None,
            skipped: false,
        }
    }

    fn set_weight_stats<T: Scalar>(&mut self, w: &Tensor<T>) {
        let d = w.data();
        let mut sum = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in d {
            let v = v.as_f64();
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        self.w_mean = Some(sum / d.len() as f64);
        self.w_min = Some(lo);
        self.w_max = Some(hi);
    }
}

fn check_domain<T: Scalar>(b: &Batch<T>, want: Domain, what: &str) -> Result<()> {
    if b.domain != want {
        return Err(Error::InvalidInput(format!(
            "{what} expects a {want:?} batch, got {:?}",
            b.domain
        )));
    }
    Ok(())
}

/// Backprops `loss` into every parameter and takes one optimizer step.
/// Unreachable parameters get no update; a non-finite loss skips the step.
fn descend<'g, T: Scalar>(
    g: &'g Graph<T>,
    loss: Var<'g, T>,
    bound: &[Var<'g, T>],
    net: &mut SegNet<T>,
    opt: &mut OptimizerState<T>,
    rec: &mut StepRecord,
) -> Result<()> {
    if !loss.item().is_finite() {
        log::warn!(
            "non-finite loss (loss_s={:?}, loss_t={:?}); step skipped",
            rec.loss_s,
            rec.loss_t
        );
        rec.skipped = true;
        return Ok(());
    }
    let d = g.grad(loss, bound, GradOptions::default())?;
    let grads: Vec<Option<Tensor<T>>> = d
        .grads
        .iter()
        .zip(&d.unreachable)
        .map(|(v, &u)| (!u).then(|| v.value()))
        .collect();
    match opt.step(&mut net.params, &grads) {
        Ok(()) => Ok(()),
        Err(Error::NonFinite { .. }) => {
            rec.skipped = true;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// One joint step on unweighted source CE (source path) plus unweighted
/// target CE (target path).
pub fn pretrain_step<T: Scalar>(
    seg: &mut SegNet<T>,
    opt: &mut OptimizerState<T>,
    batch_s: &Batch<T>,
    batch_t: &Batch<T>,
) -> Result<StepRecord> {
    check_domain(batch_s, Domain::Source, "pretrain_step")?;
    check_domain(batch_t, Domain::Target, "pretrain_step")?;
    let mut rec = StepRecord::new(Phase::Pretrain, opt.lr());
    let g = Graph::new();
    let p = seg.params.bind(&g);
    let ls = pixel_ce(
        seg.forward(&p, g.constant(batch_s.image.clone()), Domain::Source)?,
        &batch_s.label,
        None,
        IGNORE_ID,
    )?;
    let lt = pixel_ce(
        seg.forward(&p, g.constant(batch_t.image.clone()), Domain::Target)?,
        &batch_t.label,
        None,
        IGNORE_ID,
    )?;
    rec.loss_s = Some(ls.item());
    rec.loss_t = Some(lt.item());
    let loss = joint_loss(ls, lt)?;
    descend(&g, loss.value, &p, seg, opt, &mut rec)?;
    Ok(rec)
}

/// One step on the unweighted target CE alone.
pub fn target_step<T: Scalar>(seg: &mut SegNet<T>, opt: &mut OptimizerState<T>, batch_t: &Batch<T>) -> Result<StepRecord> {
    check_domain(batch_t, Domain::Target, "target_step")?;
    let mut rec = StepRecord::new(Phase::Pretrain, opt.lr());
    let g = Graph::new();
    let p = seg.params.bind(&g);
    let lt = pixel_ce(
        seg.forward(&p, g.constant(batch_t.image.clone()), Domain::Target)?,
        &batch_t.label,
        None,
        IGNORE_ID,
    )?;
    rec.loss_t = Some(lt.item());
    descend(&g, lt.value, &p, seg, opt, &mut rec)?;
    Ok(rec)
}

/// Target loss after one differentiable inner step, built on `g`.
///
/// Returns `(loss_s, loss_t, W)` where `loss_t` is a function of the
/// weighting parameters `phi` through `theta+ = theta - alpha * dloss_s/dtheta`.
/// `theta` is the source head plus the shared blocks; the target pass uses
/// the target head and the updated shared blocks.
pub(crate) fn meta_objective<'g, T: Scalar>(
    g: &'g Graph<T>,
    seg: &SegNet<T>,
    wnet: &WeightNet<T>,
    phi: &[Var<'g, T>],
    batch_s: &Batch<T>,
    batch_t: &Batch<T>,
    alpha: f64,
) -> Result<(Var<'g, T>, Var<'g, T>, Var<'g, T>)> {
    let src_idx = seg.source_indices();
    let mut theta: Vec<Var<'g, T>> = seg.params.bind_frozen(g);
    for &i in &src_idx {
        theta[i] = g.param(seg.params.get(i).clone());
    }
    let c = seg.num_classes();
    let img_s = g.constant(batch_s.image.clone());
    let oh_s = g.constant(one_hot::<T>(&batch_s.label, c, IGNORE_ID)?);
    let w = wnet.forward(phi, img_s, oh_s)?;
    let loss_s = pixel_ce(seg.forward(&theta, img_s, Domain::Source)?, &batch_s.label, Some(w), IGNORE_ID)?;

    let wrt: Vec<Var<'g, T>> = src_idx.iter().map(|&i| theta[i]).collect();
    let opts = GradOptions {
        retain: true,
        create_graph: true,
    };
    let g_theta = g.grad(loss_s.value, &wrt, opts)?;
    let theta_plus = differentiable_step(&wrt, &g_theta.grads, T::from_f64(alpha))?;
    let mut bound = theta;
    for (k, &i) in src_idx.iter().enumerate() {
        bound[i] = theta_plus[k];
    }
    let loss_t = pixel_ce(
        seg.forward(&bound, g.constant(batch_t.image.clone()), Domain::Target)?,
        &batch_t.label,
        None,
        IGNORE_ID,
    )?;
    Ok((loss_s.value, loss_t.value, w))
}

/// One update of the weighting network from the gradient of the
/// post-inner-step target loss. The segmentation network is read, never
/// written.
pub fn meta_step<T: Scalar>(
    seg: &SegNet<T>,
    wnet: &mut WeightNet<T>,
    meta_opt: &mut OptimizerState<T>,
    batch_s: &Batch<T>,
    batch_t: &Batch<T>,
    alpha: f64,
) -> Result<StepRecord> {
    check_domain(batch_s, Domain::Source, "meta_step")?;
    check_domain(batch_t, Domain::Target, "meta_step")?;
    let mut rec = StepRecord::new(Phase::Meta, meta_opt.lr());
    let g = Graph::new();
    let phi = wnet.params.bind(&g);
    let (ls, lt, w) = meta_objective(&g, seg, wnet, &phi, batch_s, batch_t, alpha)?;
    rec.loss_s = Some(ls.item().as_f64());
    rec.loss_t = Some(lt.item().as_f64());
    rec.set_weight_stats(&w.value());
    if !lt.requires_grad() {
        return Ok(rec);
    }
    let d = g.grad(lt, &phi, GradOptions::default())?;
    let grads: Vec<Option<Tensor<T>>> = d
        .grads
        .iter()
        .zip(&d.unreachable)
        .map(|(v, &u)| (!u).then(|| v.value()))
        .collect();
    if grads.iter().flatten().any(|t| !t.all_finite()) {
        log::warn!(
            "meta step: non-finite meta-gradient (loss_s={:?}, loss_t={:?}); update skipped",
            rec.loss_s,
            rec.loss_t
        );
        rec.skipped = true;
        return Ok(rec);
    }
    meta_opt.step(&mut wnet.params, &grads)?;
    Ok(rec)
}

/// One step on weighted source CE plus unweighted target CE. The weight map
/// is computed once and enters the loss as a constant.
pub fn weighted_train_step<T: Scalar>(
    seg: &mut SegNet<T>,
    wnet: &WeightNet<T>,
    opt: &mut OptimizerState<T>,
    batch_s: &Batch<T>,
    batch_t: &Batch<T>,
) -> Result<StepRecord> {
    check_domain(batch_s, Domain::Source, "weighted_train_step")?;
    check_domain(batch_t, Domain::Target, "weighted_train_step")?;
    let mut rec = StepRecord::new(Phase::Weighted, opt.lr());
    let c = seg.num_classes();
    let w = crate::nn::weight_forward(wnet, &batch_s.image, &one_hot::<T>(&batch_s.label, c, IGNORE_ID)?)?;
    rec.set_weight_stats(&w);
    let g = Graph::new();
    let p = seg.params.bind(&g);
    let ls = pixel_ce(
        seg.forward(&p, g.constant(batch_s.image.clone()), Domain::Source)?,
        &batch_s.label,
        Some(g.constant(w)),
        IGNORE_ID,
    )?;
    let lt = pixel_ce(
        seg.forward(&p, g.constant(batch_t.image.clone()), Domain::Target)?,
        &batch_t.label,
        None,
        IGNORE_ID,
    )?;
    rec.loss_s = Some(ls.item());
    rec.loss_t = Some(lt.item());
    let loss = joint_loss(ls, lt)?;
    descend(&g, loss.value, &p, seg, opt, &mut rec)?;
    Ok(rec)
}
