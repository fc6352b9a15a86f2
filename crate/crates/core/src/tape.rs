//! Reverse-mode autodiff tape with per-parameter gradient hooks.
//!
//! A [`Network`](crate::model::Network) records its forward pass through a
//! [`Recorder`]. [`Tape::backward`] walks the recorded layers in strictly
//! decreasing order and hands every parameter gradient to a hook the moment
//! it is materialized. The hook decides whether the buffer is released
//! straight away ([`Disposition::Consume`]) or parked in the parameter's
//! `grad_slot` ([`Disposition::Retain`]).
//!
//! Within an op, gradients flowing to value inputs are computed before any
//! parameter gradient is handed out, so a hook may update the parameter in
//! place without affecting the rest of the traversal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{Category, MemoryLedger};
use crate::model::{Input, Model, ParamId, Parameter, Target};
use crate::ops::Op;
use crate::tensor::{Precision, Tensor};

pub type ValueId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    #[default]
    StoreAll,
    /// Keep only each layer's output and recompute the rest during backward.
    CheckpointPerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    Value(ValueId),
    Param(ParamId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    /// Release the gradient buffer now.
    Consume,
    /// Keep the gradient in the parameter's `grad_slot`.
    Retain,
}

/// What a gradient hook gets to see besides the gradient itself.
pub struct HookCtx<'a> {
    pub id: ParamId,
    pub params: &'a mut [Parameter],
    pub ledger: &'a mut MemoryLedger,
}

impl HookCtx<'_> {
    pub fn param(&mut self) -> &mut Parameter {
        &mut self.params[self.id]
    }

    pub fn layer(&self) -> usize {
        self.params[self.id].layer
    }
}

/// Take a retained gradient out of its slot and release it in the ledger.
pub fn release_grad(
    param: &mut Parameter,
    ledger: &mut MemoryLedger,
) -> Result<Option<Tensor>> {
    match param.grad_slot.take() {
        Some(g) => {
            ledger.free(Category::Gradients, g.nbytes())?;
            Ok(Some(g))
        }
        None => Ok(None),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeStats {
    /// Op evaluations during forward, including recomputation.
    pub forward_ops: u64,
    /// The subset of `forward_ops` spent re-materializing checkpointed values.
    pub recomputed_ops: u64,
    pub backward_ops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Empty,
    Recording,
    Forwarded,
    Consumed,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<Operand>,
    out: ValueId,
}

#[derive(Debug, Clone)]
struct Slot {
    value: Option<Tensor>,
    /// `None` for leaf inputs.
    layer: Option<usize>,
    requires_grad: bool,
}

#[derive(Debug, Clone)]
struct LayerSpan {
    layer: usize,
    first_node: usize,
    end_node: usize,
    output: Option<ValueId>,
}

#[derive(Debug, Clone)]
pub struct Tape {
    policy: CheckpointPolicy,
    precision: Precision,
    nodes: Vec<Node>,
    slots: Vec<Slot>,
    spans: Vec<LayerSpan>,
    param_used: Vec<bool>,
    output: Option<ValueId>,
    state: State,
    stats: TapeStats,
}

impl Tape {
    pub fn new(policy: CheckpointPolicy) -> Self {
        Tape {
            policy,
            precision: Precision::Full,
            nodes: Vec::new(),
            slots: Vec::new(),
            spans: Vec::new(),
            param_used: Vec::new(),
            output: None,
            state: State::Empty,
            stats: TapeStats::default(),
        }
    }

    pub fn policy(&self) -> CheckpointPolicy {
        self.policy
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    /// Number of ops recorded by the last forward pass.
    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    /// Layer indices of the recorded spans, in recording order.
    pub fn layer_order(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.layer).collect()
    }

    /// Values currently held by the tape.
    pub fn live_values(&self) -> usize {
        self.slots.iter().filter(|s| s.value.is_some()).count()
    }

    /// Drop everything the tape holds and return it to the empty state.
    pub fn clear(&mut self, ledger: &mut MemoryLedger) -> Result<()> {
        for slot in &mut self.slots {
            if let Some(v) = slot.value.take() {
                ledger.free(Category::Activations, v.nbytes())?;
            }
        }
        self.nodes.clear();
        self.slots.clear();
        self.spans.clear();
        self.param_used.clear();
        self.output = None;
        self.state = State::Empty;
        self.stats = TapeStats::default();
        Ok(())
    }

    /// Record and evaluate the model on `input`, appending the matching loss
    /// when `target` is given. Returns the final value (the loss if any).
    pub fn forward(
        &mut self,
        model: &Model,
        input: &Input,
        target: Option<&Target>,
        ledger: &mut MemoryLedger,
    ) -> Result<Tensor> {
        self.clear(ledger)?;
        self.precision = model.precision();
        self.param_used = vec![false; model.params().len()];
        self.state = State::Recording;
        let mut rec = Recorder {
            tape: self,
            model,
            ledger,
        };
        let mut out = model.net().record(&mut rec, input)?;
        if let Some(target) = target {
            let op = match target {
                Target::Dense(t) => Op::SquaredError { target: t.clone() },
                Target::Tokens(ids) => Op::SoftmaxCrossEntropy {
                    targets: ids.clone(),
                },
            };
            out = rec.apply(op, &[Operand::Value(out)])?;
        }
        rec.close_layer()?;
        self.output = Some(out);
        self.state = State::Forwarded;
        Ok(self.slots[out].value.clone().expect("output retained"))
    }

    /// Reverse traversal. `loss_grad` seeds the gradient of the forward
    /// output and must match its shape.
    pub fn backward<F>(
        &mut self,
        model: &mut Model,
        loss_grad: &Tensor,
        ledger: &mut MemoryLedger,
        mut hook: F,
    ) -> Result<()>
    where
        F: FnMut(&mut HookCtx<'_>, &mut Tensor) -> Disposition,
    {
        match self.state {
            State::Forwarded => {}
            State::Consumed => return Err(Error::BackwardTwice),
            State::Empty | State::Recording => return Err(Error::BackwardWithoutForward),
        }
        let out = self.output.expect("forwarded tape has an output");
        let out_shape = self.slots[out].value.as_ref().unwrap().shape().to_vec();
        if loss_grad.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "backward",
                expected: out_shape,
                got: loss_grad.shape().to_vec(),
            });
        }
        self.state = State::Consumed;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.slots.len()];
        ledger.alloc(Category::Activations, loss_grad.nbytes())?;
        grads[out] = Some(loss_grad.clone());

        for span_idx in (0..self.spans.len()).rev() {
            let (first, end) = (self.spans[span_idx].first_node, self.spans[span_idx].end_node);
            if self.policy == CheckpointPolicy::CheckpointPerLayer {
                for n in first..end {
                    if self.slots[self.nodes[n].out].value.is_none() {
                        let v = self.eval_node(n, model)?;
                        ledger.alloc(Category::Activations, v.nbytes())?;
                        self.slots[self.nodes[n].out].value = Some(v);
                        self.stats.forward_ops += 1;
                        self.stats.recomputed_ops += 1;
                    }
                }
            }
            for n in (first..end).rev() {
                self.backward_node(n, model, &mut grads, ledger, &mut hook)?;
            }
        }

        // Leaf inputs and any gradient that never reached a consumer.
        for slot in &mut self.slots {
            if let Some(v) = slot.value.take() {
                ledger.free(Category::Activations, v.nbytes())?;
            }
        }
        for g in grads.into_iter().flatten() {
            ledger.free(Category::Activations, g.nbytes())?;
        }
        Ok(())
    }

    fn input_tensors<'a>(&'a self, inputs: &[Operand], model: &'a Model) -> Vec<&'a Tensor> {
        inputs
            .iter()
            .map(|o| match *o {
                Operand::Value(v) => self.slots[v]
                    .value
                    .as_ref()
                    .expect("operand value is live"),
                Operand::Param(p) => &model.params()[p].value,
            })
            .collect()
    }

    fn eval_node(&self, n: usize, model: &Model) -> Result<Tensor> {
        let node = &self.nodes[n];
        let inputs = self.input_tensors(&node.inputs, model);
        node.op.forward(&inputs, self.precision)
    }

    fn backward_node<F>(
        &mut self,
        n: usize,
        model: &mut Model,
        grads: &mut [Option<Tensor>],
        ledger: &mut MemoryLedger,
        hook: &mut F,
    ) -> Result<()>
    where
        F: FnMut(&mut HookCtx<'_>, &mut Tensor) -> Disposition,
    {
        let out_id = self.nodes[n].out;
        let g_out = match grads[out_id].take() {
            Some(g) => g,
            None => {
                let v = self.slots[out_id].value.as_ref().unwrap();
                let z = Tensor::zeros(v.shape().to_vec(), v.precision());
                ledger.alloc(Category::Activations, z.nbytes())?;
                z
            }
        };
        let node_inputs = self.nodes[n].inputs.clone();
        let value_mask: Vec<bool> = node_inputs
            .iter()
            .map(|o| matches!(*o, Operand::Value(v) if self.slots[v].requires_grad))
            .collect();

        if value_mask.iter().any(|&w| w) {
            let inputs = self.input_tensors(&node_inputs, model);
            let out_val = self.slots[out_id].value.as_ref().unwrap();
            let vgrads = self.nodes[n].op.backward(&inputs, out_val, &g_out, &value_mask)?;
            for (operand, g) in node_inputs.iter().zip(vgrads) {
                if let (Operand::Value(v), Some(g)) = (*operand, g) {
                    match &mut grads[v] {
                        Some(acc) => acc.zip_in_place(&g, |a, b| a + b),
                        slot => {
                            ledger.alloc(Category::Activations, g.nbytes())?;
                            *slot = Some(g);
                        }
                    }
                }
            }
        }

        for (i, operand) in node_inputs.iter().enumerate() {
            let Operand::Param(pid) = *operand else {
                continue;
            };
            let mut mask = vec![false; node_inputs.len()];
            mask[i] = true;
            let mut g = {
                let inputs = self.input_tensors(&node_inputs, model);
                let out_val = self.slots[out_id].value.as_ref().unwrap();
                self.nodes[n].op.backward(&inputs, out_val, &g_out, &mask)?[i]
                    .take()
                    .expect("requested gradient")
            };
            let nbytes = g.nbytes();
            ledger.alloc(Category::Gradients, nbytes)?;
            let disposition = {
                let mut ctx = HookCtx {
                    id: pid,
                    params: model.params_mut(),
                    ledger,
                };
                hook(&mut ctx, &mut g)
            };
            match disposition {
                Disposition::Consume => ledger.free(Category::Gradients, nbytes)?,
                Disposition::Retain => {
                    let param = &mut model.params_mut()[pid];
                    if param.grad_slot.is_some() {
                        return Err(Error::GradSlotOccupied(param.name.clone()));
                    }
                    param.grad_slot = Some(g);
                }
            }
        }

        if let Some(v) = self.slots[out_id].value.take() {
            ledger.free(Category::Activations, v.nbytes())?;
        }
        ledger.free(Category::Activations, g_out.nbytes())?;
        self.stats.backward_ops += 1;
        Ok(())
    }
}

/// Forward-recording handle given to [`Network::record`](crate::model::Network::record).
pub struct Recorder<'a> {
    tape: &'a mut Tape,
    model: &'a Model,
    ledger: &'a mut MemoryLedger,
}

impl Recorder<'_> {
    pub fn precision(&self) -> Precision {
        self.tape.precision
    }

    /// Start recording ops for `layer`. Layers must strictly increase.
    pub fn begin_layer(&mut self, layer: usize) -> Result<()> {
        if let Some(cur) = self.tape.spans.last().map(|s| s.layer) {
            if layer <= cur {
                return Err(Error::LayerOrder { current: cur, got: layer });
            }
            self.close_layer()?;
        }
        let first = self.tape.nodes.len();
        self.tape.spans.push(LayerSpan {
            layer,
            first_node: first,
            end_node: first,
            output: None,
        });
        Ok(())
    }

    /// Register a data tensor (not differentiated).
    pub fn input(&mut self, t: &Tensor) -> Result<ValueId> {
        let t = t.cast(self.tape.precision);
        self.ledger.alloc(Category::Activations, t.nbytes())?;
        self.tape.slots.push(Slot {
            value: Some(t),
            layer: None,
            requires_grad: false,
        });
        Ok(self.tape.slots.len() - 1)
    }

    pub fn apply(&mut self, op: Op, inputs: &[Operand]) -> Result<ValueId> {
        let Some(span) = self.tape.spans.last() else {
            return Err(Error::InvalidConfig(format!(
                "op `{}` recorded outside of a layer",
                op.name()
            )));
        };
        let layer = span.layer;
        let mut requires_grad = false;
        for operand in inputs {
            match *operand {
                Operand::Param(p) => {
                    if self.tape.param_used[p] {
                        return Err(Error::SharedParameter(self.model.params()[p].name.clone()));
                    }
                    self.tape.param_used[p] = true;
                    requires_grad = true;
                }
                Operand::Value(v) => {
                    let slot = &self.tape.slots[v];
                    if let Some(src) = slot.layer {
                        if src != layer {
                            let boundary = self
                                .tape
                                .spans
                                .iter()
                                .find(|s| s.layer == src)
                                .and_then(|s| s.output);
                            if boundary != Some(v) {
                                return Err(Error::CrossLayerReference {
                                    layer,
                                    source_layer: src,
                                });
                            }
                        }
                    }
                    requires_grad |= slot.requires_grad;
                }
            }
        }
        let value = {
            let tensors = self.tape.input_tensors(inputs, self.model);
            op.forward(&tensors, self.tape.precision)?
        };
        self.ledger.alloc(Category::Activations, value.nbytes())?;
        self.tape.slots.push(Slot {
            value: Some(value),
            layer: Some(layer),
            requires_grad,
        });
        let out = self.tape.slots.len() - 1;
        self.tape.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            out,
        });
        self.tape.stats.forward_ops += 1;
        let span = self.tape.spans.last_mut().unwrap();
        span.end_node = self.tape.nodes.len();
        Ok(out)
    }

    /// Seal the current layer; under per-layer checkpointing everything but
    /// its output is dropped.
    fn close_layer(&mut self) -> Result<()> {
        let Some(span) = self.tape.spans.last_mut() else {
            return Ok(());
        };
        if span.first_node == span.end_node {
            return Ok(());
        }
        let output = self.tape.nodes[span.end_node - 1].out;
        span.output = Some(output);
        if self.tape.policy == CheckpointPolicy::CheckpointPerLayer {
            for n in span.first_node..span.end_node - 1 {
                let id = self.tape.nodes[n].out;
                if let Some(v) = self.tape.slots[id].value.take() {
                    self.ledger.free(Category::Activations, v.nbytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> Operand {
        Operand::Param(id)
    }

    pub fn matmul(&mut self, a: Operand, b: Operand) -> Result<ValueId> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add_bias(&mut self, x: ValueId, bias: ParamId) -> Result<ValueId> {
        self.apply(Op::AddBias, &[Operand::Value(x), Operand::Param(bias)])
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.apply(Op::Add, &[Operand::Value(a), Operand::Value(b)])
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Tanh, &[Operand::Value(x)])
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.apply(Op::Gelu, &[Operand::Value(x)])
    }

    pub fn embedding(&mut self, ids: &[usize], table: ParamId) -> Result<ValueId> {
        self.apply(
            Op::Embedding { ids: ids.to_vec() },
            &[Operand::Param(table)],
        )
    }

    pub fn layer_norm(&mut self, x: ValueId, gain: ParamId, eps: f64) -> Result<ValueId> {
        self.apply(
            Op::LayerNorm { eps },
            &[Operand::Value(x), Operand::Param(gain)],
        )
    }

    pub fn attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<ValueId> {
        self.apply(
            Op::Attention { batch, seq, heads },
            &[Operand::Value(q), Operand::Value(k), Operand::Value(v)],
        )
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::Network;
    use crate::zoo::{build_model, Linear, ModelConfig};

    fn full(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec(), Precision::Full).unwrap()
    }

    fn dense(x: Tensor) -> Input {
        Input::Dense(x)
    }

    #[derive(Debug)]
    struct Identity;

    impl Network for Identity {
        fn num_layers(&self) -> usize {
            1
        }
        fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<ValueId> {
            let Input::Dense(x) = input else { unreachable!() };
            rec.begin_layer(0)?;
            rec.input(x)
        }
    }

    /// Uses its only weight twice.
    #[derive(Debug)]
    struct Shared;

    impl Network for Shared {
        fn num_layers(&self) -> usize {
            1
        }
        fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<ValueId> {
            let Input::Dense(x) = input else { unreachable!() };
            rec.begin_layer(0)?;
            let x = rec.input(x)?;
            let h = rec.matmul(Operand::Value(x), Operand::Param(0))?;
            rec.matmul(Operand::Value(h), Operand::Param(0))
        }
    }

    /// Layer 1 reads a value from the middle of layer 0.
    #[derive(Debug)]
    struct Reaching;

    impl Network for Reaching {
        fn num_layers(&self) -> usize {
            2
        }
        fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<ValueId> {
            let Input::Dense(x) = input else { unreachable!() };
            rec.begin_layer(0)?;
            let x = rec.input(x)?;
            let inner = rec.matmul(Operand::Value(x), Operand::Param(0))?;
            rec.tanh(inner)?;
            rec.begin_layer(1)?;
            rec.matmul(Operand::Value(inner), Operand::Param(1))
        }
    }

    #[derive(Debug)]
    struct Backwards;

    impl Network for Backwards {
        fn num_layers(&self) -> usize {
            2
        }
        fn record(&self, rec: &mut Recorder<'_>, input: &Input) -> Result<ValueId> {
            let Input::Dense(x) = input else { unreachable!() };
            rec.begin_layer(1)?;
            rec.begin_layer(0)?;
            rec.input(x)
        }
    }

    fn square(n: usize, layers: &[usize]) -> Vec<Parameter> {
        layers
            .iter()
            .enumerate()
            .map(|(i, &l)| Parameter::new(format!("w{i}"), l, full(&[n, n], &vec![0.5; n * n])))
            .collect()
    }

    #[test]
    fn identity_model_returns_input() {
        let m = Model::new(Arc::new(Identity), vec![]).unwrap();
        let mut tape = Tape::new(CheckpointPolicy::StoreAll);
        let mut ledger = MemoryLedger::new();
        let x = full(&[1, 3], &[1.0, 2.0, 3.0]);
        let y = tape.forward(&m, &dense(x.clone()), None, &mut ledger).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_linear_gradient() {
        let mut m = Linear::model(full(&[1, 1], &[2.0])).unwrap();
        let mut tape = Tape::new(CheckpointPolicy::StoreAll);
        let mut ledger = MemoryLedger::new();
        let y = tape.forward(&m, &dense(full(&[1, 1], &[3.0])), None, &mut ledger).unwrap();
        assert_eq!(y.item(), 6.0);
        let mut seen = Vec::new();
        tape.backward(&mut m, &full(&[1, 1], &[1.0]), &mut ledger, |ctx, g| {
            seen.push((ctx.param().name.clone(), g.item()));
            Disposition::Consume
        })
        .unwrap();
        assert_eq!(seen, vec![("weight".to_string(), 3.0)]);
        assert!(m.params()[0].grad_slot.is_none());
    }

    #[test]
    fn mlp_forward_matches_straight_line() {
        let m = build_model(&ModelConfig::mlp(1, 3, 2, 7)).unwrap();
        let p: Vec<&[f64]> = m.params().iter().map(|p| p.value.data()).collect();
        let (w0, b0, w1, b1) = (p[0], p[1], p[2], p[3]);
        let xs = [0.3, -0.7, 0.9, 0.1];
        let mut want = Vec::new();
        for row in xs.chunks(2) {
            let a: Vec<f64> = (0..3)
                .map(|j| {
                    let mut z = 0.0;
                    for k in 0..2 {
                        z += row[k] * w0[k * 3 + j];
                    }
                    (z + b0[j]).tanh()
                })
                .collect();
            let mut y = 0.0;
            for k in 0..3 {
                y += a[k] * w1[k];
            }
            want.push(y + b1[0]);
        }
        for policy in [CheckpointPolicy::StoreAll, CheckpointPolicy::CheckpointPerLayer] {
            let mut tape = Tape::new(policy);
            let y = tape
                .forward(&m, &dense(full(&[2, 2], &xs)), None, &mut MemoryLedger::new())
                .unwrap();
            assert_eq!(y.data(), &want[..]);
        }
    }

    #[test]
    fn hooks_see_non_increasing_layers_and_one_live_gradient() {
        let mut m = build_model(&ModelConfig::mini_transformer(2, 8, 2, 5, 1)).unwrap();
        for policy in [CheckpointPolicy::StoreAll, CheckpointPolicy::CheckpointPerLayer] {
            let mut tape = Tape::new(policy);
            let mut ledger = MemoryLedger::new();
            let input = Input::Tokens {
                ids: vec![0, 1, 2, 3, 4, 0],
                batch: 2,
                seq: 3,
            };
            let target = Target::Tokens(vec![0, 1, 2, 3, 4, 0]);
            tape.forward(&m, &input, Some(&target), &mut ledger).unwrap();
            let mut layers = Vec::new();
            tape.backward(&mut m, &Tensor::scalar(1.0), &mut ledger, |ctx, _| {
                assert_eq!(ctx.ledger.live_tensors(Category::Gradients), 1);
                layers.push(ctx.layer());
                Disposition::Consume
            })
            .unwrap();
            assert_eq!(layers.len(), m.params().len());
            assert!(layers.windows(2).all(|w| w[0] >= w[1]), "{layers:?}");
            assert_eq!(ledger.current(Category::Gradients), 0);
            assert_eq!(ledger.current(Category::Activations), 0);
        }
    }

    #[test]
    fn retain_keeps_gradients() {
        let mut m = build_model(&ModelConfig::mlp(2, 3, 2, 1)).unwrap();
        let mut tape = Tape::new(CheckpointPolicy::StoreAll);
        let mut ledger = MemoryLedger::new();
        let x = dense(full(&[1, 2], &[0.5, -0.5]));
        let t = Target::Dense(full(&[1, 1], &[0.2]));
        tape.forward(&m, &x, Some(&t), &mut ledger).unwrap();
        tape.backward(&mut m, &Tensor::scalar(1.0), &mut ledger, |_, _| Disposition::Retain)
            .unwrap();
        for p in m.params() {
            assert_eq!(p.grad_slot.as_ref().unwrap().shape(), p.value.shape());
        }
        assert_eq!(ledger.current(Category::Gradients), m.param_bytes());
    }

    #[test]
    fn backward_state_errors() {
        let mut m = Linear::model(full(&[1, 1], &[2.0])).unwrap();
        let mut tape = Tape::new(CheckpointPolicy::StoreAll);
        let mut ledger = MemoryLedger::new();
        let seed = full(&[1, 1], &[1.0]);
        let r = tape.backward(&mut m, &seed, &mut ledger, |_, _| Disposition::Consume);
        assert!(matches!(r, Err(Error::BackwardWithoutForward)));
        tape.forward(&m, &dense(full(&[1, 1], &[3.0])), None, &mut ledger).unwrap();
        tape.backward(&mut m, &seed, &mut ledger, |_, _| Disposition::Consume).unwrap();
        let r = tape.backward(&mut m, &seed, &mut ledger, |_, _| Disposition::Consume);
        assert!(matches!(r, Err(Error::BackwardTwice)));
    }

    #[test]
    fn structural_errors() {
        let mut ledger = MemoryLedger::new();
        let x = dense(full(&[1, 2], &[1.0, 1.0]));

        let m = Model::new(Arc::new(Shared), square(2, &[0])).unwrap();
        let r = Tape::new(CheckpointPolicy::StoreAll).forward(&m, &x, None, &mut ledger);
        assert!(matches!(r, Err(Error::SharedParameter(ref n)) if n == "w0"));

        let m = Model::new(Arc::new(Reaching), square(2, &[0, 1])).unwrap();
        let r = Tape::new(CheckpointPolicy::StoreAll).forward(&m, &x, None, &mut ledger);
        assert!(matches!(r, Err(Error::CrossLayerReference { layer: 1, source_layer: 0 })));

        let m = Model::new(Arc::new(Backwards), vec![]).unwrap();
        let r = Tape::new(CheckpointPolicy::StoreAll).forward(&m, &x, None, &mut ledger);
        assert!(matches!(r, Err(Error::LayerOrder { current: 1, got: 0 })));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let m = build_model(&ModelConfig::mlp(1, 3, 2, 1)).unwrap();
        let r = Tape::new(CheckpointPolicy::StoreAll).forward(
            &m,
            &dense(full(&[1, 3], &[1.0, 2.0, 3.0])),
            None,
            &mut MemoryLedger::new(),
        );
        assert!(matches!(r, Err(Error::ShapeMismatch { op: "matmul", .. })), "{r:?}");
    }
}
