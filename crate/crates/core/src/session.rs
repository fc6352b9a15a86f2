use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{Category, MemoryLedger};
use crate::model::{Batch, Model};
use crate::tape::{release_grad, CheckpointPolicy, Disposition, HookCtx, Tape, TapeStats};
use crate::tensor::{Precision, Tensor};

/// Cumulative pass and op counters for one training run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub forward_passes: u64,
    pub backward_passes: u64,
    pub forward_ops: u64,
    pub recomputed_ops: u64,
    pub backward_ops: u64,
}

impl PassCounts {
    fn absorb_backward(&mut self, s: TapeStats) {
        self.forward_ops += s.recomputed_ops;
        self.recomputed_ops += s.recomputed_ops;
        self.backward_ops += s.backward_ops;
    }
}

/// Per-parameter auxiliary tensors kept by an optimizer across steps.
#[derive(Debug, Clone, Default)]
pub enum OptimizerStates {
    #[default]
    Empty,
    /// Full-precision master weights (SGD under mixed precision).
    Master(Vec<Tensor>),
    AdamW {
        master: Option<Vec<Tensor>>,
        momentum: Vec<Tensor>,
        variance: Vec<Tensor>,
        step: u64,
    },
}

impl OptimizerStates {
    pub fn nbytes(&self) -> u64 {
        let sum = |v: &[Tensor]| v.iter().map(Tensor::nbytes).sum::<u64>();
        match self {
            OptimizerStates::Empty => 0,
            OptimizerStates::Master(m) => sum(m),
            OptimizerStates::AdamW {
                master,
                momentum,
                variance,
                ..
            } => master.as_deref().map_or(0, sum) + sum(momentum) + sum(variance),
        }
    }
}

/// One model being trained, with its memory ledger and tape.
#[derive(Debug)]
pub struct Session {
    pub model: Model,
    pub ledger: MemoryLedger,
    pub(crate) states: OptimizerStates,
    tape: Tape,
    counts: PassCounts,
}

impl Session {
    pub fn new(model: Model, policy: CheckpointPolicy) -> Result<Self> {
        Self::with_ledger(model, policy, MemoryLedger::new())
    }

    pub fn with_ledger(model: Model, policy: CheckpointPolicy, mut ledger: MemoryLedger) -> Result<Self> {
        for p in model.params() {
            ledger.alloc(Category::Params, p.value.nbytes())?;
        }
        Ok(Session {
            model,
            ledger,
            states: OptimizerStates::Empty,
            tape: Tape::new(policy),
            counts: PassCounts::default(),
        })
    }

    pub fn precision(&self) -> Precision {
        self.model.precision()
    }

    pub fn policy(&self) -> CheckpointPolicy {
        self.tape.policy()
    }

    pub fn counts(&self) -> PassCounts {
        self.counts
    }

    pub fn optimizer_states(&self) -> &OptimizerStates {
        &self.states
    }

    /// Forward pass with loss. A non-finite loss releases the tape and
    /// returns an error.
    pub fn forward(&mut self, batch: &Batch) -> Result<f64> {
        let loss = self
            .tape
            .forward(&self.model, &batch.input, Some(&batch.target), &mut self.ledger)?
            .item();
        self.counts.forward_passes += 1;
        self.counts.forward_ops += self.tape.stats().forward_ops;
        if !loss.is_finite() {
            self.tape.clear(&mut self.ledger)?;
            return Err(Error::NonFiniteLoss(loss));
        }
        Ok(loss)
    }

    /// Backward from the last forward, seeding the loss gradient with `seed`.
    pub fn backward<F>(&mut self, seed: f64, hook: F) -> Result<()>
    where
        F: FnMut(&mut HookCtx<'_>, &mut Tensor) -> Disposition,
    {
        let seed = Tensor::scalar(seed);
        let res = self
            .tape
            .backward(&mut self.model, &seed, &mut self.ledger, hook);
        if res.is_ok() {
            self.counts.backward_passes += 1;
            self.counts.absorb_backward(self.tape.stats());
        }
        res
    }

    /// Release every retained gradient.
    pub fn clear_grads(&mut self) -> Result<()> {
        for p in self.model.params_mut() {
            release_grad(p, &mut self.ledger)?;
        }
        Ok(())
    }

    /// Forward + backward that retains every gradient, leaving them in the
    /// parameters' grad slots. Returns the loss.
    pub fn compute_grads(&mut self, batch: &Batch, seed: f64) -> Result<f64> {
        let loss = self.forward(batch)?;
        self.backward(seed, |_, _| Disposition::Retain)?;
        Ok(loss)
    }

    pub(crate) fn set_states(&mut self, states: OptimizerStates) -> Result<()> {
        let old = self.states.nbytes();
        if old > 0 {
            self.ledger.record(Category::OptimStates, -(old as i64))?;
        }
        let new = states.nbytes();
        if new > 0 {
            self.ledger.record(Category::OptimStates, new as i64)?;
        }
        self.states = states;
        Ok(())
    }

    /// Evaluate the loss without touching the session's ledger or counters.
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let mut scratch = MemoryLedger::new();
        let mut tape = Tape::new(CheckpointPolicy::StoreAll);
        let loss = tape
            .forward(&self.model, &batch.input, Some(&batch.target), &mut scratch)?
            .item();
        tape.clear(&mut scratch)?;
        Ok(loss)
    }
}
