//! Two sequential single-sample SGD steps against one step on both samples.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Batch, Model};
use crate::optim::{sgd_update, GradTransform};
use crate::session::Session;
use crate::tape::CheckpointPolicy;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitBatchReport {
    pub lr: f64,
    pub divergence: f64,
    pub divergence_half_lr: f64,
    /// `divergence / divergence_half_lr`; about 4 on a smooth loss.
    pub shrink_ratio: f64,
}

fn grads(model: &Model, batch: &Batch) -> Result<Vec<Tensor>> {
    let mut s = Session::new(model.clone(), CheckpointPolicy::StoreAll)?;
    s.compute_grads(batch, 1.0)?;
    Ok(s
        .model
        .params_mut()
        .iter_mut()
        .map(|p| p.grad_slot.take().expect("retained gradient"))
        .collect())
}

fn descend(model: &mut Model, grads: &[Tensor], lr: f64) {
    for (p, g) in model.params_mut().iter_mut().zip(grads) {
        sgd_update(&mut p.value, g, lr, &GradTransform::IDENTITY);
    }
}

/// `||theta_2 - theta'||_2`, where `theta'` takes one step on the summed
/// gradients of `d_i` and `d_j` and `theta_2` steps on `d_i` then `d_j`.
pub fn implicit_batch_divergence(model: &Model, d_i: &Batch, d_j: &Batch, lr: f64) -> Result<f64> {
    let g_i = grads(model, d_i)?;
    let g_j = grads(model, d_j)?;

    let mut batched = model.clone();
    descend(&mut batched, &g_i, lr);
    descend(&mut batched, &g_j, lr);

    let mut sequential = model.clone();
    descend(&mut sequential, &g_i, lr);
    let g_j_after = grads(&sequential, d_j)?;
    descend(&mut sequential, &g_j_after, lr);

    let sq = sequential
        .flat_values()
        .iter()
        .zip(batched.flat_values())
        .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
    Ok(sq.sqrt())
}

pub fn implicit_batch_experiment(
    model: &Model,
    d_i: &Batch,
    d_j: &Batch,
    lr: f64,
) -> Result<ImplicitBatchReport> {
    let divergence = implicit_batch_divergence(model, d_i, d_j, lr)?;
    let divergence_half_lr = implicit_batch_divergence(model, d_i, d_j, lr / 2.0)?;
    Ok(ImplicitBatchReport {
        lr,
        divergence,
        divergence_half_lr,
        shrink_ratio: divergence / divergence_half_lr,
    })
}
