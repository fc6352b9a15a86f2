//! Gradient clipping without a full set of gradients, and dynamic loss
//! scaling for half-precision training.
//!
//! Clipping by value is hook-local and costs nothing extra. Global-norm
//! clipping and loss scaling need to see every gradient before the first
//! update, so they run the two-pass protocol: pass one accumulates the norm
//! and looks for overflow without touching any parameter, pass two applies
//! the fused updates. When both are active they share the same two passes.
//!
//! Value clipping tends to be the better choice at learning rates below
//! roughly 1e-3; at higher rates it truncates often enough to bend the
//! update direction noticeably.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::optim::{self, StepResult};
use crate::session::Session;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClipMode {
    #[default]
    None,
    ByValue { threshold: f64 },
    ByGlobalNorm { max_norm: f64 },
    /// Norm clipping per window of `window` consecutive layers.
    ByGroupNorm { max_norm: f64, window: usize },
}

impl ClipMode {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{what} must be positive, got {v}")))
            }
        };
        match *self {
            ClipMode::None => Ok(()),
            ClipMode::ByValue { threshold } => positive(threshold, "clip threshold"),
            ClipMode::ByGlobalNorm { max_norm } => positive(max_norm, "max_norm"),
            ClipMode::ByGroupNorm { max_norm, window } => {
                positive(max_norm, "max_norm")?;
                if window == 0 {
                    return Err(Error::InvalidConfig("group window must be >= 1".into()));
                }
                Ok(())
            }
        }
    }

    pub fn value_threshold(&self) -> Option<f64> {
        match *self {
            ClipMode::ByValue { threshold } => Some(threshold),
            _ => None,
        }
    }
}

/// Clamp every element to `[-threshold, threshold]`.
pub fn clip_by_value(g: &Tensor, threshold: f64) -> Tensor {
    let mut out = g.clone();
    clip_by_value_in_place(&mut out, threshold);
    out
}

pub fn clip_by_value_in_place(g: &mut Tensor, threshold: f64) {
    g.map_in_place(|x| x.clamp(-threshold, threshold));
}

/// `min(1, max_norm / norm)`.
pub fn clip_factor(norm: f64, max_norm: f64) -> f64 {
    (max_norm / norm).min(1.0)
}

/// Running sum of squared, unscaled gradient elements.
///
/// Accumulates tensor by tensor in delivery order, element by element, so
/// the result is reproducible bit for bit.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormAccumulator {
    sum_sq: f64,
}

impl NormAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, g: &Tensor, loss_scale: f64) {
        for &x in g.data() {
            let u = x / loss_scale;
            self.sum_sq += u * u;
        }
    }

    pub fn norm(&self) -> f64 {
        self.sum_sq.sqrt()
    }
}

pub const DEFAULT_INITIAL_SCALE: f64 = 1024.0;
pub const DEFAULT_GROWTH_INTERVAL: u32 = 16;
pub const DEFAULT_MIN_SCALE: f64 = 1.0;
pub const DEFAULT_MAX_SCALE: f64 = 16_777_216.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleChange {
    Unchanged,
    Doubled,
    Halved,
}

/// Dynamic loss scale: halve and skip on overflow, double after
/// `growth_interval` consecutive clean steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossScalerState {
    pub scale: f64,
    pub growth_interval: u32,
    pub clean_steps: u32,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for LossScalerState {
    fn default() -> Self {
        LossScalerState {
            scale: DEFAULT_INITIAL_SCALE,
            growth_interval: DEFAULT_GROWTH_INTERVAL,
            clean_steps: 0,
            min_scale: DEFAULT_MIN_SCALE,
            max_scale: DEFAULT_MAX_SCALE,
        }
    }
}

fn is_power_of_two(x: f64) -> bool {
    x > 0.0 && x.is_finite() && x.log2().fract() == 0.0 && 2f64.powi(x.log2() as i32) == x
}

impl LossScalerState {
    pub fn new(scale: f64, growth_interval: u32, min_scale: f64, max_scale: f64) -> Result<Self> {
        let s = LossScalerState {
            scale,
            growth_interval,
            clean_steps: 0,
            min_scale,
            max_scale,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(is_power_of_two(self.scale)
            && is_power_of_two(self.min_scale)
            && is_power_of_two(self.max_scale))
        {
            return bad("loss scales must be powers of two".into());
        }
        if !(self.min_scale <= self.scale && self.scale <= self.max_scale) {
            return bad(format!(
                "scale {} outside [{}, {}]",
                self.scale, self.min_scale, self.max_scale
            ));
        }
        if self.growth_interval == 0 {
            return bad("growth_interval must be >= 1".into());
        }
        if self.clean_steps >= self.growth_interval {
            return bad("clean_steps must be below growth_interval".into());
        }
        Ok(())
    }

    pub fn on_clean(&mut self) -> ScaleChange {
        self.clean_steps += 1;
        if self.clean_steps >= self.growth_interval {
            self.clean_steps = 0;
            let grown = (self.scale * 2.0).min(self.max_scale);
            if grown != self.scale {
                self.scale = grown;
                return ScaleChange::Doubled;
            }
        }
        ScaleChange::Unchanged
    }

    /// Errors when halving would drop below `min_scale`; the state is left
    /// untouched in that case.
    pub fn on_overflow(&mut self) -> Result<ScaleChange> {
        let halved = self.scale / 2.0;
        if halved < self.min_scale {
            return Err(Error::ScaleUnderflow {
                scale: halved,
                min: self.min_scale,
            });
        }
        self.scale = halved;
        self.clean_steps = 0;
        Ok(ScaleChange::Halved)
    }
}

/// Fused update with global-norm clipping computed in a preceding
/// norm-only backward pass.
pub fn two_pass_norm_clip_step(
    session: &mut Session,
    batch: &Batch,
    lr: f64,
    max_norm: f64,
) -> Result<StepResult> {
    optim::lomo_step(
        session,
        batch,
        lr,
        ClipMode::ByGlobalNorm { max_norm },
        None,
    )
}

/// Single-pass fused update where each window of `window` consecutive
/// layers is clipped by its own norm. Biased: different groups get
/// different effective step sizes.
pub fn grouped_norm_clip_step(
    session: &mut Session,
    batch: &Batch,
    lr: f64,
    max_norm: f64,
    window: usize,
) -> Result<StepResult> {
    optim::lomo_step(
        session,
        batch,
        lr,
        ClipMode::ByGroupNorm { max_norm, window },
        None,
    )
}

/// Loss-scaled fused step. Pass one looks for non-finite gradients; on
/// overflow the scale is halved and no parameter is touched.
pub fn scaled_step(
    session: &mut Session,
    batch: &Batch,
    lr: f64,
    scaler: &mut LossScalerState,
    clip: ClipMode,
) -> Result<StepResult> {
    optim::lomo_step(session, batch, lr, clip, Some(scaler))
}
