//! Small deterministic models used by every experiment.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Input, Model, Network, ParamId, Parameter};
use crate::tape::{Operand, Recorder, ValueId};
use crate::tensor::{Precision, Tensor};

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.08;

/// Half-width for token embeddings, which feed a norm directly and are
/// kept near unit scale.
pub const EMBED_INIT_RANGE: f64 = 1.0;

const LN_EPS: f64 = 1e-5;

/// Feed-forward width multiplier of the mini-transformer.
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    MiniTransformer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    /// Transformer only.
    #[serde(default)]
    pub vocab: usize,
    /// Transformer only.
    #[serde(default)]
    pub heads: usize,
    /// MLP only: width of the input features.
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    pub seed: u64,
}

fn default_input_dim() -> usize {
    1
}

impl ModelConfig {
    pub fn mlp(layers: usize, hidden: usize, input_dim: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            layers,
            hidden,
            vocab: 0,
            heads: 0,
            input_dim,
            seed,
        }
    }

    pub fn mini_transformer(layers: usize, hidden: usize, heads: usize, vocab: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::MiniTransformer,
            layers,
            hidden,
            vocab,
            heads,
            input_dim: 1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 || self.hidden == 0 {
            return bad(format!(
                "layers and hidden must be >= 1 (got {} and {})",
                self.layers, self.hidden
            ));
        }
        match self.kind {
            ModelKind::Mlp if self.input_dim == 0 => bad("input_dim must be >= 1".into()),
            ModelKind::MiniTransformer if self.vocab == 0 || self.heads == 0 => {
                bad("vocab and heads must be >= 1".into())
            }
            ModelKind::MiniTransformer if self.hidden % self.heads != 0 => bad(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )),
            _ => Ok(()),
        }
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
        }
    }

    fn uniform(&mut self, name: String, layer: usize, shape: Vec<usize>) -> ParamId {
        self.uniform_in(name, layer, shape, INIT_RANGE)
    }

    fn uniform_in(&mut self, name: String, layer: usize, shape: Vec<usize>, range: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.gen_range(-range..=range))
            .collect();
        self.push(name, layer, shape, data)
    }

    fn ones(&mut self, name: String, layer: usize, n: usize) -> ParamId {
        self.push(name, layer, vec![n], vec![1.0; n])
    }

    fn push(&mut self, name: String, layer: usize, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let value = Tensor::new(shape, data, Precision::Full).expect("valid init shape");
        self.params.push(Parameter::new(name, layer, value));
        self.params.len() - 1
    }
}

/// Build a zoo model in full precision.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    match cfg.kind {
        ModelKind::Mlp => Mlp::build(cfg),
        ModelKind::MiniTransformer => MiniTransformer::build(cfg),
    }
}

/// Tanh multilayer perceptron: `layers` hidden layers of width `hidden`,
/// then a linear head with a single regression output at layer `layers`.
#[derive(Debug, Clone)]
pub struct Mlp {
    linears: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    fn build(cfg: &ModelConfig) -> Result<Model> {
        let mut init = Init::new(cfg.seed);
        let mut linears = Vec::with_capacity(cfg.layers + 1);
        for l in 0..cfg.layers {
            let fan_in = if l == 0 { cfg.input_dim } else { cfg.hidden };
            let w = init.uniform(format!("layer{l}.weight"), l, vec![fan_in, cfg.hidden]);
            let b = init.uniform(format!("layer{l}.bias"), l, vec![cfg.hidden]);
            linears.push((w, b));
        }
        let l = cfg.layers;
        let fan_in = if l == 0 { cfg.input_dim } else { cfg.hidden };
        let w = init.uniform("head.weight".into(), l, vec![fan_in, 1]);
        let b = init.uniform("head.bias".into(), l, vec![1]);
        linears.push((w, b));
        Model::new(Arc::new(Mlp { linears }), init.params)
    }
}

impl Network for Mlp {
    fn num_layers(&self) -> usize {
        self.linears.len()
    }

    fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<ValueId> {
        let Input::Dense(x) = input else {
            return Err(Error::InvalidConfig("MLP expects dense input".into()));
        };
        let mut h = None;
        for (l, &(w, b)) in self.linears.iter().enumerate() {
            rec.begin_layer(l)?;
            let x = match h {
                Some(v) => v,
                None => rec.input(x)?,
            };
            let z = rec.matmul(Operand::Value(x), Operand::Param(w))?;
            let z = rec.add_bias(z, b)?;
            h = Some(if l + 1 < self.linears.len() { rec.tanh(z)? } else { z });
        }
        Ok(h.expect("at least one layer"))
    }
}

/// Bias-free linear map `y = x W`, one layer. Handy for hand-checkable cases.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
}

impl Linear {
    pub fn model(weight: Tensor) -> Result<Model> {
        let p = Parameter::new("weight", 0, weight);
        Model::new(Arc::new(Linear { weight: 0 }), vec![p])
    }
}

impl Network for Linear {
    fn num_layers(&self) -> usize {
        1
    }

    fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<ValueId> {
        let Input::Dense(x) = input else {
            return Err(Error::InvalidConfig("linear model expects dense input".into()));
        };
        rec.begin_layer(0)?;
        let x = rec.input(x)?;
        rec.matmul(Operand::Value(x), Operand::Param(self.weight))
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: ParamId,
    w_in: ParamId,
    w_out: ParamId,
}

/// Pre-norm transformer over token ids with untied embedding and head.
///
/// Layer 0 is the embedding, layers `1..=L` are the blocks and layer `L+1`
/// holds the final norm and output projection. No positional embedding:
/// the copy task only needs per-position identity.
#[derive(Debug, Clone)]
pub struct MiniTransformer {
    heads: usize,
    embed: ParamId,
    blocks: Vec<Block>,
    final_ln: ParamId,
    head: ParamId,
}

impl MiniTransformer {
    fn build(cfg: &ModelConfig) -> Result<Model> {
        let (h, v) = (cfg.hidden, cfg.vocab);
        let ffn = FFN_MULT * h;
        let mut init = Init::new(cfg.seed);
        let embed = init.uniform_in("embed".into(), 0, vec![v, h], EMBED_INIT_RANGE);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let l = i + 1;
            let name = |s: &str| format!("block{i}.{s}");
            blocks.push(Block {
                ln1: init.ones(name("ln1"), l, h),
                wq: init.uniform(name("wq"), l, vec![h, h]),
                wk: init.uniform(name("wk"), l, vec![h, h]),
                wv: init.uniform(name("wv"), l, vec![h, h]),
                wo: init.uniform(name("wo"), l, vec![h, h]),
                ln2: init.ones(name("ln2"), l, h),
                w_in: init.uniform(name("ffn_in"), l, vec![h, ffn]),
                w_out: init.uniform(name("ffn_out"), l, vec![ffn, h]),
            });
        }
        let last = cfg.layers + 1;
        let final_ln = init.ones("final_ln".into(), last, h);
        let head = init.uniform("head".into(), last, vec![h, v]);
        let net = MiniTransformer {
            heads: cfg.heads,
            embed,
            blocks,
            final_ln,
            head,
        };
        Model::new(Arc::new(net), init.params)
    }

    /// Closed-form parameter count for `layers` blocks.
    pub fn param_count(layers: usize, hidden: usize, vocab: usize) -> usize {
        let h = hidden;
        let ffn = FFN_MULT * h;
        let per_block = 4 * h * h + 2 * h * ffn + 2 * h;
        vocab * h + layers * per_block + h + h * vocab
    }
}

impl Network for MiniTransformer {
    fn num_layers(&self) -> usize {
        self.blocks.len() + 2
    }

    fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<ValueId> {
        let Input::Tokens { ids, batch, seq } = input else {
            return Err(Error::InvalidConfig("transformer expects token input".into()));
        };
        if ids.len() != batch * seq {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                expected: vec![batch * seq],
                got: vec![ids.len()],
            });
        }
        rec.begin_layer(0)?;
        let mut x = rec.embedding(ids, self.embed)?;
        for (i, b) in self.blocks.iter().enumerate() {
            rec.begin_layer(i + 1)?;
            let h = rec.layer_norm(x, b.ln1, LN_EPS)?;
            let q = rec.matmul(Operand::Value(h), Operand::Param(b.wq))?;
            let k = rec.matmul(Operand::Value(h), Operand::Param(b.wk))?;
            let v = rec.matmul(Operand::Value(h), Operand::Param(b.wv))?;
            let a = rec.attention(q, k, v, *batch, *seq, self.heads)?;
            let o = rec.matmul(Operand::Value(a), Operand::Param(b.wo))?;
            let x1 = rec.add(x, o)?;
            let h2 = rec.layer_norm(x1, b.ln2, LN_EPS)?;
            let f = rec.matmul(Operand::Value(h2), Operand::Param(b.w_in))?;
            let f = rec.gelu(f)?;
            let f = rec.matmul(Operand::Value(f), Operand::Param(b.w_out))?;
            x = rec.add(x1, f)?;
        }
        rec.begin_layer(self.blocks.len() + 1)?;
        let hf = rec.layer_norm(x, self.final_ln, LN_EPS)?;
        rec.matmul(Operand::Value(hf), Operand::Param(self.head))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_build_is_deterministic() {
        let cfg = ModelConfig::mlp(2, 4, 3, 7);
        let a = build_model(&cfg).unwrap();
        let b = build_model(&cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.flat_values(), b.flat_values());
        let c = build_model(&ModelConfig::mlp(2, 4, 3, 8)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn init_range_is_respected() {
        let m = build_model(&ModelConfig::mini_transformer(1, 8, 2, 16, 3)).unwrap();
        for p in m.params() {
            let limit = if p.name == "embed" { EMBED_INIT_RANGE } else { INIT_RANGE };
            if !p.name.contains("ln") {
                assert!(p.value.max_abs() <= limit, "{}", p.name);
            }
        }
    }

    #[test]
    fn transformer_param_count_matches_enumeration() {
        let m = build_model(&ModelConfig::mini_transformer(2, 32, 4, 64, 1)).unwrap();
        // Hand count: embed 64*32 + 2 * (4*32*32 + 2*32*128 + 2*32) + 32 + 32*64.
        let hand = 2048 + 2 * (4096 + 8192 + 64) + 32 + 2048;
        assert_eq!(m.param_count(), hand);
        assert_eq!(MiniTransformer::param_count(2, 32, 64), hand);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let err = build_model(&ModelConfig::mini_transformer(2, 32, 3, 64, 1)).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn zero_extents_rejected() {
        assert!(build_model(&ModelConfig::mlp(0, 4, 3, 1)).is_err());
        assert!(build_model(&ModelConfig::mlp(2, 0, 3, 1)).is_err());
        assert!(build_model(&ModelConfig::mini_transformer(1, 8, 2, 0, 1)).is_err());
    }
}
