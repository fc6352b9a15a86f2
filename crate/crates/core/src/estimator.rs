//! Closed-form training-memory estimate for decoder-only transformers.
//!
//! Parameters, gradients and optimizer states follow directly from the
//! parameter count and the byte widths each optimizer keeps. Activation
//! memory has no exact closed form without fixing an implementation, so it
//! uses a calibrated per-token model (see [`activation_bytes`]).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::zoo::{ModelConfig, ModelKind, FFN_MULT};

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

/// Bytes of activation per token, per hidden unit, per layer, without
/// checkpointing, at 16-bit width. Fitted so that the 7B reference
/// configuration at 8 x 512 tokens lands on 45.61 GiB.
pub const ACT_BYTES_PER_TOKEN_HIDDEN_LAYER: f64 = 90.73;

/// Working set of one recomputed layer under checkpointing, bytes per
/// token per hidden unit at 16-bit width (the usual 34·s·b·h count for a
/// layer without attention-score storage).
pub const RECOMPUTE_BYTES_PER_TOKEN_HIDDEN: f64 = 34.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// Gate, up and down projections.
    Gated,
    /// Up and down projections.
    Plain,
}

impl FfnKind {
    fn matrices(self) -> u64 {
        match self {
            FfnKind::Gated => 3,
            FfnKind::Plain => 2,
        }
    }
}

/// Shape of a bias-free pre-norm decoder with gain-only norms: token
/// embedding, `layers` blocks (four attention projections, the FFN
/// matrices and two norm gains each), a final norm and an output head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub layers: u64,
    pub hidden: u64,
    pub heads: u64,
    pub ffn_hidden: u64,
    pub vocab: u64,
    pub ffn: FfnKind,
    pub tie_embeddings: bool,
}

impl ArchSpec {
    pub fn llama_7b() -> Self {
        ArchSpec {
            layers: 32,
            hidden: 4096,
            heads: 32,
            ffn_hidden: 11008,
            vocab: 32000,
            ffn: FfnKind::Gated,
            tie_embeddings: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "llama-7b" | "llama7b" | "7b" => Some(Self::llama_7b()),
            _ => None,
        }
    }

    /// The architecture of a zoo mini-transformer.
    pub fn from_zoo(cfg: &ModelConfig) -> Result<Self> {
        if cfg.kind != ModelKind::MiniTransformer {
            return Err(Error::InvalidConfig("only transformers have an ArchSpec".into()));
        }
        Ok(ArchSpec {
            layers: cfg.layers as u64,
            hidden: cfg.hidden as u64,
            heads: cfg.heads as u64,
            ffn_hidden: (FFN_MULT * cfg.hidden) as u64,
            vocab: cfg.vocab as u64,
            ffn: FfnKind::Plain,
            tie_embeddings: false,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.vocab == 0 || self.ffn_hidden == 0 {
            return Err(Error::InvalidConfig("arch extents must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig("hidden must be divisible by heads".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> u64 {
        let h = self.hidden;
        let per_layer = 4 * h * h + self.ffn.matrices() * h * self.ffn_hidden + 2 * h;
        let embed = self.vocab * h;
        let head = if self.tie_embeddings { 0 } else { self.vocab * h };
        embed + self.layers * per_layer + h + head
    }

    /// Element count of the largest single parameter tensor.
    pub fn largest_tensor(&self) -> u64 {
        let h = self.hidden;
        let mut m = (self.vocab * h).max(h);
        if self.layers > 0 {
            m = m.max(h * h).max(h * self.ffn_hidden);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerFamily {
    #[serde(rename = "adamw")]
    AdamW,
    Sgd,
    Lomo,
}

impl OptimizerFamily {
    pub const ALL: [OptimizerFamily; 3] = [OptimizerFamily::AdamW, OptimizerFamily::Sgd, OptimizerFamily::Lomo];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adamw" | "adam" => Some(OptimizerFamily::AdamW),
            "sgd" => Some(OptimizerFamily::Sgd),
            "lomo" => Some(OptimizerFamily::Lomo),
            _ => None,
        }
    }
}

impl fmt::Display for OptimizerFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerFamily::AdamW => "AdamW",
            OptimizerFamily::Sgd => "SGD",
            OptimizerFamily::Lomo => "LOMO",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemPrecision {
    Mixed16,
    Full32,
}

impl MemPrecision {
    fn bytes(self) -> u64 {
        match self {
            MemPrecision::Mixed16 => 2,
            MemPrecision::Full32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub optimizer: OptimizerFamily,
    pub precision: MemPrecision,
    pub activation_checkpointing: bool,
    pub seq_len: u64,
    pub batch: u64,
}

impl TrainSetup {
    /// The 512 x 8 token setting of the 7B memory profile.
    pub fn reference(optimizer: OptimizerFamily, activation_checkpointing: bool) -> Self {
        TrainSetup {
            optimizer,
            precision: MemPrecision::Mixed16,
            activation_checkpointing,
            seq_len: 512,
            batch: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteBreakdown {
    pub params: u64,
    pub gradients: u64,
    pub optim_states: u64,
    pub activations: u64,
}

impl ByteBreakdown {
    pub fn total(&self) -> u64 {
        self.params + self.gradients + self.optim_states + self.activations
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub optimizer: OptimizerFamily,
    pub activation_checkpointing: bool,
    /// GiB, rounded to two decimals.
    pub params_gib: f64,
    pub gradients_gib: f64,
    pub optim_states_gib: f64,
    /// Calibrated, not derived.
    pub activations_gib: f64,
    /// Sum of the four rounded columns.
    pub total_gib: f64,
    /// Optimizer-state share of `total_gib`, percent.
    pub optim_share_of_total: f64,
    /// Optimizer-state share of params + gradients + optimizer states, percent.
    pub optim_share_of_model_states: f64,
    pub param_count: u64,
    pub bytes: ByteBreakdown,
}

fn gib2(bytes: u64) -> f64 {
    (bytes as f64 / GIB * 100.0).round() / 100.0
}

/// Activation bytes. Without checkpointing every layer keeps its
/// per-token working set; with checkpointing each layer keeps only its
/// input and one layer's working set is live during recomputation. The
/// output logits are counted once in both cases.
pub fn activation_bytes(arch: &ArchSpec, setup: &TrainSetup) -> u64 {
    let pb = setup.precision.bytes() as f64;
    let width = pb / 2.0;
    let tokens = (setup.batch * setup.seq_len) as f64;
    let h = arch.hidden as f64;
    let layers = arch.layers as f64;
    let logits = tokens * arch.vocab as f64 * pb;
    let body = if setup.activation_checkpointing {
        tokens * h * pb * layers + tokens * h * RECOMPUTE_BYTES_PER_TOKEN_HIDDEN * width
    } else {
        layers * tokens * h * ACT_BYTES_PER_TOKEN_HIDDEN_LAYER * width
    };
    (body + logits).round() as u64
}

pub fn estimate(arch: &ArchSpec, setup: &TrainSetup) -> Result<MemoryEstimate> {
    arch.validate()?;
    if setup.seq_len == 0 || setup.batch == 0 {
        return Err(Error::InvalidConfig("seq_len and batch must be >= 1".into()));
    }
    let count = arch.param_count();
    let pb = setup.precision.bytes();
    let params = count * pb;
    let gradients = match setup.optimizer {
        OptimizerFamily::AdamW | OptimizerFamily::Sgd => count * pb,
        OptimizerFamily::Lomo => arch.largest_tensor() * pb,
    };
    let optim_states = match (setup.optimizer, setup.precision) {
        // master copy + momentum + variance
        (OptimizerFamily::AdamW, MemPrecision::Mixed16) => count * 12,
        (OptimizerFamily::AdamW, MemPrecision::Full32) => count * 8,
        // master copy
        (OptimizerFamily::Sgd, MemPrecision::Mixed16) => count * 4,
        (OptimizerFamily::Sgd, MemPrecision::Full32) => 0,
        (OptimizerFamily::Lomo, _) => 0,
    };
    let bytes = ByteBreakdown {
        params,
        gradients,
        optim_states,
        activations: activation_bytes(arch, setup),
    };
    let (p, g, o, a) = (
        gib2(bytes.params),
        gib2(bytes.gradients),
        gib2(bytes.optim_states),
        gib2(bytes.activations),
    );
    let total = ((p + g + o + a) * 100.0).round() / 100.0;
    let share = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 0.0 };
    Ok(MemoryEstimate {
        optimizer: setup.optimizer,
        activation_checkpointing: setup.activation_checkpointing,
        params_gib: p,
        gradients_gib: g,
        optim_states_gib: o,
        activations_gib: a,
        total_gib: total,
        optim_share_of_total: share(o, total),
        optim_share_of_model_states: share(o, p + g + o),
        param_count: count,
        bytes,
    })
}

/// All optimizer x checkpointing rows for one architecture.
pub fn table(arch: &ArchSpec, precision: MemPrecision, seq_len: u64, batch: u64) -> Result<Vec<MemoryEstimate>> {
    let mut rows = Vec::with_capacity(6);
    for opt in OptimizerFamily::ALL {
        for ac in [false, true] {
            let setup = TrainSetup {
                optimizer: opt,
                precision,
                activation_checkpointing: ac,
                seq_len,
                batch,
            };
            rows.push(estimate(arch, &setup)?);
        }
    }
    Ok(rows)
}

/// Plain-text rendering with the usual GB column headings.
pub fn render_table(rows: &[MemoryEstimate]) -> String {
    let mut out = format!(
        "{:<10}{:<5}{:>10}{:>12}{:>15}{:>14}{:>15}\n",
        "Optimizer", "AC", "Params", "Gradients", "Optim States", "Activations", "Total Memory"
    );
    for r in rows {
        out += &format!(
            "{:<10}{:<5}{:>10.2}{:>12.2}{:>15.2}{:>14.2}{:>15.2}\n",
            r.optimizer.to_string(),
            if r.activation_checkpointing { "yes" } else { "no" },
            r.params_gib,
            r.gradients_gib,
            r.optim_states_gib,
            r.activations_gib,
            r.total_gib
        );
    }
    out
}
