//! Low-memory fused-update training engine.
//!
//! A small reverse-mode autodiff tape whose backward pass hands each
//! parameter gradient to a hook as soon as it exists. The LOMO optimizer
//! uses that hook to update the parameter in place and drop the gradient,
//! keeping at most one gradient tensor alive. Around it sit the usual
//! baselines (SGD, AdamW), gradient clipping and loss scaling that work
//! without a full gradient set, a per-category memory ledger, and a
//! closed-form memory estimator for full-size transformer configurations.

pub mod error;
pub mod estimator;
pub mod half;
pub mod ledger;
pub mod model;
pub mod ops;
pub mod optim;
pub mod session;
pub mod stabilize;
pub mod tape;
pub mod task;
pub mod tensor;
pub mod trainer;
pub mod zoo;

pub use error::{Error, Result};
pub use ledger::{Category, MemoryLedger, MemorySnapshot};
pub use model::{Batch, Input, Model, Network, Parameter, Target};
pub use optim::{lomo_step, sgd_step, OptimizerKind, StepOutcome, StepResult};
pub use session::Session;
pub use stabilize::{ClipMode, LossScalerState};
pub use tape::{CheckpointPolicy, Disposition, Tape};
pub use task::{SyntheticTask, TaskKind};
pub use tensor::{Precision, Tensor};
pub use trainer::{run, RunConfig, RunReport};
pub use zoo::{build_model, ModelConfig, ModelKind};
