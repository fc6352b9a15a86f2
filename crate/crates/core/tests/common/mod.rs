#![allow(dead_code)]

use lomo_core::model::ParamId;
use lomo_core::{
    build_model, Batch, CheckpointPolicy, Disposition, Model, ModelConfig, Precision, Session,
    SyntheticTask, Tensor,
};

/// A model config paired with a task it can train on.
#[derive(Debug, Clone)]
pub struct Case {
    pub name: &'static str,
    pub model: ModelConfig,
    pub task: SyntheticTask,
    pub batch: usize,
}

impl Case {
    pub fn build(&self, precision: Precision) -> Model {
        build_model(&self.model).unwrap().into_precision(precision)
    }

    pub fn session(&self, precision: Precision, policy: CheckpointPolicy) -> Session {
        Session::new(self.build(precision), policy).unwrap()
    }

    pub fn batch(&self, step: u64) -> Batch {
        self.task.sample_batch(self.batch, step).unwrap()
    }
}

pub fn mlp(name: &'static str, layers: usize, hidden: usize, dim: usize, seed: u64) -> Case {
    Case {
        name,
        model: ModelConfig::mlp(layers, hidden, dim, seed),
        task: SyntheticTask::regression(dim, seed + 100),
        batch: 6,
    }
}

pub fn transformer(name: &'static str, layers: usize, hidden: usize, heads: usize, vocab: usize, seed: u64) -> Case {
    Case {
        name,
        model: ModelConfig::mini_transformer(layers, hidden, heads, vocab, seed),
        task: SyntheticTask::sequence_copy(5, vocab, seed + 100),
        batch: 3,
    }
}

/// Five small model/task combinations of both families.
pub fn cases() -> Vec<Case> {
    vec![
        mlp("mlp-1x8", 1, 8, 3, 11),
        mlp("mlp-2x16", 2, 16, 4, 12),
        mlp("mlp-3x8", 3, 8, 2, 13),
        transformer("tf-1x8", 1, 8, 2, 7, 14),
        transformer("tf-2x12", 2, 12, 3, 9, 15),
    ]
}

/// Gradients of one forward/backward, indexed by parameter, plus the order
/// in which the hook received them.
pub fn grads_and_order(session: &mut Session, batch: &Batch) -> (Vec<Tensor>, Vec<ParamId>) {
    session.forward(batch).unwrap();
    let mut order = Vec::new();
    let mut grads: Vec<Option<Tensor>> = vec![None; session.model.params().len()];
    session
        .backward(1.0, |ctx, g| {
            order.push(ctx.id);
            grads[ctx.id] = Some(g.clone());
            Disposition::Consume
        })
        .unwrap();
    (grads.into_iter().map(|g| g.expect("every parameter gets a gradient")).collect(), order)
}

pub fn bits(m: &Model) -> Vec<u64> {
    m.flat_values().iter().map(|x| x.to_bits()).collect()
}
