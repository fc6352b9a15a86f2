use thiserror::Error;

use crate::ledger::Category;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward called before forward")]
    BackwardWithoutForward,

    #[error("backward already ran on this tape; record a new forward first")]
    BackwardTwice,

    #[error("parameter `{0}` used by more than one op; shared parameters are not supported")]
    SharedParameter(String),

    #[error("layer {layer} references an internal value of earlier layer {source_layer}")]
    CrossLayerReference { layer: usize, source_layer: usize },

    #[error("layers must be recorded in increasing order: got {got} after {current}")]
    LayerOrder { current: usize, got: usize },

    #[error("parameter `{0}` already holds a retained gradient")]
    GradSlotOccupied(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),

    #[error("loss scale {scale} would drop below minimum {min}; training diverged")]
    ScaleUnderflow { scale: f64, min: f64 },

    #[error("ledger underflow in {category:?}: current {current} bytes, delta {delta}")]
    LedgerUnderflow {
        category: Category,
        current: u64,
        delta: i64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("report serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
