//! SGD, AdamW and the fused LOMO update over the same tape.
//!
//! SGD and AdamW retain every gradient until backward finishes and then
//! update. LOMO updates each parameter inside the backward hook and drops
//! its gradient before the next one is materialized, so at most one
//! gradient tensor is alive at any time and no optimizer state exists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::MemoryLedger;
use crate::model::{Batch, ParamId, Parameter};
use crate::session::{OptimizerStates, Session};
use crate::stabilize::{clip_factor, ClipMode, LossScalerState, NormAccumulator, ScaleChange};
use crate::tape::{release_grad, Disposition};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        lr: f64,
    },
    Lomo {
        lr: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adamw(lr: f64) -> Self {
        OptimizerKind::AdamW {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Lomo { lr } | OptimizerKind::AdamW { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerKind::Sgd { .. } => OptimizerKind::Sgd { lr },
            OptimizerKind::Lomo { .. } => OptimizerKind::Lomo { lr },
            OptimizerKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } => OptimizerKind::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Lomo { .. } => "lomo",
            OptimizerKind::AdamW { .. } => "adamw",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {lr}")));
        }
        if let OptimizerKind::AdamW { beta1, beta2, eps, weight_decay, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
            }
            if eps < 0.0 || weight_decay < 0.0 {
                return Err(Error::InvalidConfig("eps and weight_decay must be >= 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    Applied,
    SkippedOverflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub loss: f64,
    pub outcome: StepOutcome,
    /// Unscaled global gradient norm, when a pass computed it.
    pub grad_norm: Option<f64>,
    /// Clip factors per layer group, in backward order (grouped clipping only).
    pub group_factors: Vec<f64>,
    pub scale_change: Option<ScaleChange>,
}

impl StepResult {
    fn applied(loss: f64) -> Self {
        StepResult {
            loss,
            outcome: StepOutcome::Applied,
            grad_norm: None,
            group_factors: Vec::new(),
            scale_change: None,
        }
    }
}

/// How a raw (possibly loss-scaled) gradient element becomes the value fed
/// into the update: unscale, clamp, then multiply by the norm clip factor.
#[derive(Debug, Clone, Copy)]
pub struct GradTransform {
    pub loss_scale: f64,
    pub clip_value: Option<f64>,
    pub factor: f64,
}

impl GradTransform {
    pub const IDENTITY: GradTransform = GradTransform {
        loss_scale: 1.0,
        clip_value: None,
        factor: 1.0,
    };

    #[inline]
    pub fn apply(&self, g: f64) -> f64 {
        let mut u = g / self.loss_scale;
        if let Some(t) = self.clip_value {
            u = u.clamp(-t, t);
        }
        u * self.factor
    }
}

/// `p <- p - lr * T(g)`, computed in full width and rounded to the
/// parameter's precision on write.
pub fn sgd_update(value: &mut Tensor, grad: &Tensor, lr: f64, tf: &GradTransform) {
    value.zip_in_place(grad, |p, g| p - lr * tf.apply(g));
}

/// Plain SGD: materialize every gradient, then update.
pub fn sgd_step(session: &mut Session, batch: &Batch, lr: f64) -> Result<f64> {
    Ok(sgd_step_with(session, batch, lr, ClipMode::None, None)?.loss)
}

/// SGD with the stabilizers applied the conventional way, on the full set of
/// retained gradients.
pub fn sgd_step_with(
    session: &mut Session,
    batch: &Batch,
    lr: f64,
    clip: ClipMode,
    scaler: Option<&mut LossScalerState>,
) -> Result<StepResult> {
    clip.validate()?;
    let scale = scaler.as_ref().map_or(1.0, |s| s.scale);
    let loss = session.compute_grads(batch, scale)?;
    let (factors, mut result) = match retained_factors(session, clip, scale) {
        Some(f) => f,
        None => {
            session.clear_grads()?;
            let change = scaler.map(|s| s.on_overflow()).transpose()?;
            return Ok(skipped(loss, change));
        }
    };
    result.loss = loss;
    if session.precision() == Precision::HalfEmulated && matches!(session.states, OptimizerStates::Empty) {
        let master = session
            .model
            .params()
            .iter()
            .map(|p| p.value.cast(Precision::Full))
            .collect();
        session.set_states(OptimizerStates::Master(master))?;
    }
    let Session { model, ledger, states, .. } = session;
    for (id, param) in model.params_mut().iter_mut().enumerate() {
        let g = release_grad(param, ledger)?.expect("retained gradient");
        let tf = GradTransform {
            loss_scale: scale,
            clip_value: clip.value_threshold(),
            factor: factors[id],
        };
        match states {
            OptimizerStates::Master(master) => {
                sgd_update(&mut master[id], &g, lr, &tf);
                param.value.assign(master[id].data())?;
            }
            _ => sgd_update(&mut param.value, &g, lr, &tf),
        }
    }
    result.scale_change = scaler.map(|s| s.on_clean());
    Ok(result)
}

fn skipped(loss: f64, change: Option<ScaleChange>) -> StepResult {
    StepResult {
        loss,
        outcome: StepOutcome::SkippedOverflow,
        grad_norm: None,
        group_factors: Vec::new(),
        scale_change: change,
    }
}

/// Per-parameter norm clip factors computed from retained gradients, or
/// `None` on overflow. Norms accumulate in backward delivery order, which
/// for zoo models is reverse declaration order.
fn retained_factors(session: &Session, clip: ClipMode, scale: f64) -> Option<(Vec<f64>, StepResult)> {
    let params = session.model.params();
    fn grad(p: &Parameter) -> &Tensor {
        p.grad_slot.as_ref().expect("retained gradient")
    }
    if params.iter().any(|p| !grad(p).all_finite()) {
        return None;
    }
    let mut factors = vec![1.0; params.len()];
    let mut result = StepResult::applied(0.0);
    match clip {
        ClipMode::ByGlobalNorm { max_norm } => {
            let mut acc = NormAccumulator::new();
            for p in params.iter().rev() {
                acc.add(grad(p), scale);
            }
            let norm = acc.norm();
            if !norm.is_finite() {
                return None;
            }
            factors.fill(clip_factor(norm, max_norm));
            result.grad_norm = Some(norm);
        }
        ClipMode::ByGroupNorm { max_norm, window } => {
            let mut ids: Vec<usize> = (0..params.len()).rev().collect();
            while !ids.is_empty() {
                let group = params[ids[0]].layer / window;
                let split = ids
                    .iter()
                    .position(|&i| params[i].layer / window != group)
                    .unwrap_or(ids.len());
                let members: Vec<usize> = ids.drain(..split).collect();
                let mut acc = NormAccumulator::new();
                for &i in &members {
                    acc.add(grad(&params[i]), scale);
                }
                let f = clip_factor(acc.norm(), max_norm);
                result.group_factors.push(f);
                for i in members {
                    factors[i] = f;
                }
            }
        }
        ClipMode::None | ClipMode::ByValue { .. } => {}
    }
    Some((factors, result))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decoupled-weight-decay Adam over retained gradients. Under half
/// precision a full-precision master copy joins momentum and variance.
pub fn adamw_step(
    session: &mut Session,
    batch: &Batch,
    lr: f64,
    hp: AdamWParams,
    clip: ClipMode,
    scaler: Option<&mut LossScalerState>,
) -> Result<StepResult> {
    clip.validate()?;
    let scale = scaler.as_ref().map_or(1.0, |s| s.scale);
    let loss = session.compute_grads(batch, scale)?;
    let (factors, mut result) = match retained_factors(session, clip, scale) {
        Some(f) => f,
        None => {
            session.clear_grads()?;
            let change = scaler.map(|s| s.on_overflow()).transpose()?;
            return Ok(skipped(loss, change));
        }
    };
    result.loss = loss;
    if !matches!(session.states, OptimizerStates::AdamW { .. }) {
        let zeros = |p: &Parameter| Tensor::zeros(p.value.shape().to_vec(), Precision::Full);
        let params = session.model.params();
        let master = (session.precision() == Precision::HalfEmulated)
            .then(|| params.iter().map(|p| p.value.cast(Precision::Full)).collect());
        let states = OptimizerStates::AdamW {
            master,
            momentum: params.iter().map(zeros).collect(),
            variance: params.iter().map(zeros).collect(),
            step: 0,
        };
        session.set_states(states)?;
    }
    let Session { model, ledger, states, .. } = session;
    let OptimizerStates::AdamW { master, momentum, variance, step } = states else {
        unreachable!("AdamW states initialized above");
    };
    *step += 1;
    let t = *step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (id, param) in model.params_mut().iter_mut().enumerate() {
        let g = release_grad(param, ledger)?.expect("retained gradient");
        let tf = GradTransform {
            loss_scale: scale,
            clip_value: clip.value_threshold(),
            factor: factors[id],
        };
        let (m, v) = (&mut momentum[id], &mut variance[id]);
        let target: &mut Tensor = match master {
            Some(ms) => &mut ms[id],
            None => &mut param.value,
        };
        let mut new = target.data().to_vec();
        let mut md = m.data().to_vec();
        let mut vd = v.data().to_vec();
        for i in 0..new.len() {
            let gi = tf.apply(g.data()[i]);
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gi;
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            new[i] -= lr * hp.weight_decay * new[i];
            new[i] -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
        m.assign(&md)?;
        v.assign(&vd)?;
        target.assign(&new)?;
        if master.is_some() {
            param.value.assign(&new)?;
        }
    }
    result.scale_change = scaler.map(|s| s.on_clean());
    Ok(result)
}

/// Fused update: each parameter is updated inside the backward hook and its
/// gradient released immediately.
///
/// Global-norm clipping and loss scaling add a first backward pass that only
/// accumulates the norm and checks for non-finite values; both share that
/// pass. Grouped clipping keeps one window of layers' gradients and flushes
/// it when the traversal leaves the window.
pub fn lomo_step(
    session: &mut Session,
    batch: &Batch,
    lr: f64,
    clip: ClipMode,
    mut scaler: Option<&mut LossScalerState>,
) -> Result<StepResult> {
    clip.validate()?;
    let scale = scaler.as_ref().map_or(1.0, |s| s.scale);
    let two_pass = scaler.is_some() || matches!(clip, ClipMode::ByGlobalNorm { .. });
    let mut factor = 1.0;
    let mut grad_norm = None;

    if two_pass {
        let loss = session.forward(batch)?;
        let mut acc = NormAccumulator::new();
        let mut overflow = false;
        session.backward(scale, |_, g| {
            if !overflow {
                if g.all_finite() {
                    acc.add(g, scale);
                } else {
                    overflow = true;
                }
            }
            Disposition::Consume
        })?;
        let norm = acc.norm();
        if overflow || !norm.is_finite() {
            let change = scaler.map(|s| s.on_overflow()).transpose()?;
            return Ok(skipped(loss, change));
        }
        grad_norm = Some(norm);
        if let ClipMode::ByGlobalNorm { max_norm } = clip {
            factor = clip_factor(norm, max_norm);
        }
    }

    let loss = session.forward(batch)?;
    let mut result = StepResult::applied(loss);
    result.grad_norm = grad_norm;
    match clip {
        ClipMode::ByGroupNorm { max_norm, window } => {
            let mut group_sizes = std::collections::BTreeMap::new();
            for p in session.model.params() {
                *group_sizes.entry(p.layer / window).or_insert(0usize) += 1;
            }
            let mut pending: Vec<ParamId> = Vec::new();
            let mut current = None;
            let mut flush_err = None;
            let mut factors = Vec::new();
            let mut record = |flushed: Result<Option<f64>>| match flushed {
                Ok(Some(f)) => factors.push(f),
                Ok(None) => {}
                Err(e) => {
                    flush_err.get_or_insert(e);
                }
            };
            session.backward(scale, |ctx, g| {
                let group = ctx.layer() / window;
                if current != Some(group) {
                    // Leftovers of a group that had unused parameters.
                    record(flush_group(ctx.params, ctx.ledger, &mut pending, None, lr, scale, max_norm));
                    current = Some(group);
                }
                if pending.len() + 1 == group_sizes[&group] {
                    let last = Some((ctx.id, &*g));
                    record(flush_group(ctx.params, ctx.ledger, &mut pending, last, lr, scale, max_norm));
                    current = None;
                    Disposition::Consume
                } else {
                    pending.push(ctx.id);
                    Disposition::Retain
                }
            })?;
            let Session { model, ledger, .. } = session;
            record(flush_group(model.params_mut(), ledger, &mut pending, None, lr, scale, max_norm));
            if let Some(e) = flush_err {
                return Err(e);
            }
            result.group_factors = factors;
        }
        _ => {
            let tf = GradTransform {
                loss_scale: scale,
                clip_value: clip.value_threshold(),
                factor,
            };
            session.backward(scale, |ctx, g| {
                sgd_update(&mut ctx.param().value, g, lr, &tf);
                Disposition::Consume
            })?;
        }
    }
    result.scale_change = scaler.as_mut().map(|s| s.on_clean());
    Ok(result)
}

/// Clip and apply one group: the retained gradients in `pending` plus,
/// optionally, the gradient just handed to the hook. Retained buffers are
/// released. A group whose norm is not finite is released without updating.
fn flush_group(
    params: &mut [Parameter],
    ledger: &mut MemoryLedger,
    pending: &mut Vec<ParamId>,
    last: Option<(ParamId, &Tensor)>,
    lr: f64,
    scale: f64,
    max_norm: f64,
) -> Result<Option<f64>> {
    if pending.is_empty() && last.is_none() {
        return Ok(None);
    }
    let mut acc = NormAccumulator::new();
    for &id in pending.iter() {
        acc.add(params[id].grad_slot.as_ref().expect("retained gradient"), scale);
    }
    if let Some((_, g)) = last {
        acc.add(g, scale);
    }
    let norm = acc.norm();
    let factor = clip_factor(norm, max_norm);
    let tf = GradTransform {
        loss_scale: scale,
        clip_value: None,
        factor,
    };
    for id in pending.drain(..) {
        let g = release_grad(&mut params[id], ledger)?.expect("retained gradient");
        if norm.is_finite() {
            sgd_update(&mut params[id].value, &g, lr, &tf);
        }
    }
    if let (Some((id, g)), true) = (last, norm.is_finite()) {
        sgd_update(&mut params[id].value, g, lr, &tf);
    }
    Ok(Some(factor))
}

/// Run one step of `kind` at learning rate `lr` (the schedule is applied by
/// the caller).
pub fn step(
    session: &mut Session,
    kind: &OptimizerKind,
    batch: &Batch,
    lr: f64,
    clip: ClipMode,
    scaler: Option<&mut LossScalerState>,
) -> Result<StepResult> {
    match *kind {
        OptimizerKind::Sgd { .. } => sgd_step_with(session, batch, lr, clip, scaler),
        OptimizerKind::Lomo { .. } => lomo_step(session, batch, lr, clip, scaler),
        OptimizerKind::AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } => adamw_step(
            session,
            batch,
            lr,
            AdamWParams {
                beta1,
                beta2,
                eps,
                weight_decay,
            },
            clip,
            scaler,
        ),
    }
}
