//! Parameters, model containers and the batch types fed to them.

use std::collections::HashSet;
use std::fmt::Debug;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::Recorder;
use crate::tensor::{Precision, Tensor};

pub type ParamId = usize;

/// A named leaf tensor owned by one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub layer: usize,
    pub value: Tensor,
    /// Gradient retained by the last backward pass, if any.
    pub grad_slot: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, layer: usize, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            layer,
            value,
            grad_slot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Dense(Tensor),
    Tokens {
        ids: Vec<usize>,
        batch: usize,
        seq: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Regression targets for a squared-error loss.
    Dense(Tensor),
    /// Class ids for a softmax cross-entropy loss.
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Input,
    pub target: Target,
}

/// A model definition that records its forward computation on a tape.
///
/// Ops must be recorded layer by layer in increasing layer order, and only
/// the last value of a layer may be read by later layers.
pub trait Network: Debug + Send + Sync {
    fn num_layers(&self) -> usize;

    /// Record the forward pass and return the output value.
    fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<crate::tape::ValueId>;
}

#[derive(Debug, Clone)]
pub struct Model {
    net: Arc<dyn Network>,
    params: Vec<Parameter>,
    precision: Precision,
}

impl Model {
    pub fn new(net: Arc<dyn Network>, params: Vec<Parameter>) -> Result<Self> {
        let mut names = HashSet::new();
        for p in &params {
            if !names.insert(p.name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate parameter name `{}`",
                    p.name
                )));
            }
            if p.layer >= net.num_layers() {
                return Err(Error::InvalidConfig(format!(
                    "parameter `{}` has layer {} but the network has {} layers",
                    p.name,
                    p.layer,
                    net.num_layers()
                )));
            }
        }
        let precision = params
            .first()
            .map(|p| p.value.precision())
            .unwrap_or_default();
        if params.iter().any(|p| p.value.precision() != precision) {
            return Err(Error::InvalidConfig("mixed parameter precisions".into()));
        }
        Ok(Model {
            net,
            params,
            precision,
        })
    }

    pub fn net(&self) -> &dyn Network {
        self.net.as_ref()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Convert every parameter to `precision`.
    pub fn into_precision(mut self, precision: Precision) -> Self {
        for p in &mut self.params {
            p.value = p.value.cast(precision);
        }
        self.precision = precision;
        self
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param_bytes(&self) -> u64 {
        self.params.iter().map(|p| p.value.nbytes()).sum()
    }

    pub fn max_param_bytes(&self) -> u64 {
        self.params.iter().map(|p| p.value.nbytes()).max().unwrap_or(0)
    }

    /// SHA-256 over parameter names, shapes and the exact bits of every value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in p.value.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Flattened parameter values in declaration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }
}
