//! Forward and vector-Jacobian kernels for the ops the model zoo uses.
//!
//! Every reduction accumulates sequentially in index order so results are
//! bit-reproducible across runs and across recomputation.

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// `[m,n] + [n]` broadcast over rows.
    AddBias,
    /// Elementwise sum of two equal shapes.
    Add,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
    /// Row gather from a `[vocab, hidden]` table.
    Embedding { ids: Vec<usize> },
    /// Gain-only layer normalization over the last axis.
    LayerNorm { eps: f64 },
    /// Multi-head softmax attention over `q, k, v` of shape `[batch*seq, hidden]`.
    Attention {
        batch: usize,
        seq: usize,
        heads: usize,
    },
    /// Mean token cross-entropy of `[m, vocab]` logits.
    SoftmaxCrossEntropy { targets: Vec<usize> },
    /// `sum((y - t)^2) / (2 * rows)`.
    SquaredError { target: Tensor },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Tanh => "tanh",
            Op::Gelu => "gelu",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::SquaredError { .. } => "squared_error",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Tanh
            | Op::Gelu
            | Op::Embedding { .. }
            | Op::SoftmaxCrossEntropy { .. }
            | Op::SquaredError { .. } => 1,
            Op::MatMul | Op::AddBias | Op::Add | Op::LayerNorm { .. } => 2,
            Op::Attention { .. } => 3,
        }
    }

    pub fn is_loss(&self) -> bool {
        matches!(self, Op::SoftmaxCrossEntropy { .. } | Op::SquaredError { .. })
    }

    /// Evaluate the op. Non-loss outputs are written at `precision`; losses
    /// are always reported in full precision.
    pub fn forward(&self, inputs: &[&Tensor], precision: Precision) -> Result<Tensor> {
        debug_assert_eq!(inputs.len(), self.arity());
        let name = self.name();
        match self {
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = a.dims2();
                let (k2, n) = b.dims2();
                if k != k2 || a.shape().len() != 2 || b.shape().len() != 2 {
                    return Err(mismatch(name, vec![k, n], b.shape()));
                }
                let (ad, bd) = (a.data(), b.data());
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for p in 0..k {
                            acc += ad[i * k + p] * bd[p * n + j];
                        }
                        out[i * n + j] = acc;
                    }
                }
                Tensor::new(vec![m, n], out, precision)
            }
            Op::AddBias => {
                let (x, b) = (inputs[0], inputs[1]);
                let (m, n) = x.dims2();
                if b.numel() != n {
                    return Err(mismatch(name, vec![n], b.shape()));
                }
                let (xd, bd) = (x.data(), b.data());
                let out = (0..m * n).map(|i| xd[i] + bd[i % n]).collect();
                Tensor::new(x.shape().to_vec(), out, precision)
            }
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(mismatch(name, a.shape().to_vec(), b.shape()));
                }
                let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), out, precision)
            }
            Op::Tanh => {
                let x = inputs[0];
                let out = x.data().iter().map(|v| v.tanh()).collect();
                Tensor::new(x.shape().to_vec(), out, precision)
            }
            Op::Gelu => {
                let x = inputs[0];
                let out = x.data().iter().map(|&v| gelu(v)).collect();
                Tensor::new(x.shape().to_vec(), out, precision)
            }
            Op::Embedding { ids } => {
                let table = inputs[0];
                let (vocab, hidden) = table.dims2();
                let td = table.data();
                let mut out = Vec::with_capacity(ids.len() * hidden);
                for &id in ids {
                    if id >= vocab {
                        return Err(Error::InvalidTensor(format!(
                            "token id {id} out of range for vocab {vocab}"
                        )));
                    }
                    out.extend_from_slice(&td[id * hidden..(id + 1) * hidden]);
                }
                Tensor::new(vec![ids.len(), hidden], out, precision)
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (inputs[0], inputs[1]);
                let (m, h) = x.dims2();
                if gain.numel() != h {
                    return Err(mismatch(name, vec![h], gain.shape()));
                }
                let gd = gain.data();
                let mut out = Vec::with_capacity(m * h);
                for r in 0..m {
                    let row = &x.data()[r * h..(r + 1) * h];
                    let (xhat, _) = normalize_row(row, *eps);
                    out.extend(xhat.iter().zip(gd).map(|(v, g)| v * g));
                }
                Tensor::new(x.shape().to_vec(), out, precision)
            }
            Op::Attention { batch, seq, heads } => {
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                let (rows, hidden) = q.dims2();
                if rows != batch * seq || hidden % heads != 0 {
                    return Err(mismatch(name, vec![batch * seq, hidden], q.shape()));
                }
                if k.shape() != q.shape() || v.shape() != q.shape() {
                    return Err(mismatch(name, q.shape().to_vec(), k.shape()));
                }
                let geo = AttnGeometry::new(*batch, *seq, *heads, hidden);
                let mut out = vec![0.0; rows * hidden];
                for b in 0..*batch {
                    for hd in 0..*heads {
                        let probs = geo.probs(q.data(), k.data(), b, hd);
                        for i in 0..*seq {
                            for c in 0..geo.head_dim {
                                let mut acc = 0.0;
                                for j in 0..*seq {
                                    acc += probs[i * seq + j] * v.data()[geo.idx(b, j, hd, c)];
                                }
                                out[geo.idx(b, i, hd, c)] = acc;
                            }
                        }
                    }
                }
                Tensor::new(q.shape().to_vec(), out, precision)
            }
            Op::SoftmaxCrossEntropy { targets } => {
                let logits = inputs[0];
                let (m, vocab) = logits.dims2();
                if targets.len() != m {
                    return Err(mismatch(name, vec![m], &[targets.len()]));
                }
                let mut total = 0.0;
                for (r, &t) in targets.iter().enumerate() {
                    if t >= vocab {
                        return Err(Error::InvalidTensor(format!(
                            "target {t} out of range for vocab {vocab}"
                        )));
                    }
                    let row = &logits.data()[r * vocab..(r + 1) * vocab];
                    total += log_sum_exp(row) - row[t];
                }
                Ok(Tensor::scalar(total / m as f64))
            }
            Op::SquaredError { target } => {
                let pred = inputs[0];
                if pred.shape() != target.shape() {
                    return Err(mismatch(name, target.shape().to_vec(), pred.shape()));
                }
                let (m, _) = pred.dims2();
                let sum = pred
                    .data()
                    .iter()
                    .zip(target.data())
                    .fold(0.0, |acc, (y, t)| acc + (y - t) * (y - t));
                Ok(Tensor::scalar(sum / (2.0 * m as f64)))
            }
        }
    }

    /// Vector-Jacobian products for the inputs flagged in `wanted`.
    ///
    /// Each gradient is written at the precision of the input it belongs to.
    pub fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        grad_out: &Tensor,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = grad_out.data();
        let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
        let like = |i: usize, data: Vec<f64>| -> Result<Tensor> {
            Tensor::new(inputs[i].shape().to_vec(), data, inputs[i].precision())
        };
        match self {
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = a.dims2();
                let (_, n) = b.dims2();
                let (ad, bd) = (a.data(), b.data());
                if wanted[0] {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            da[i * k + p] = acc;
                        }
                    }
                    grads[0] = Some(like(0, da)?);
                }
                if wanted[1] {
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += ad[i * k + p] * g[i * n + j];
                            }
                            db[p * n + j] = acc;
                        }
                    }
                    grads[1] = Some(like(1, db)?);
                }
            }
            Op::AddBias => {
                let (m, n) = inputs[0].dims2();
                if wanted[0] {
                    grads[0] = Some(like(0, g.to_vec())?);
                }
                if wanted[1] {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    grads[1] = Some(like(1, db)?);
                }
            }
            Op::Add => {
                for i in 0..2 {
                    if wanted[i] {
                        grads[i] = Some(like(i, g.to_vec())?);
                    }
                }
            }
            Op::Tanh => {
                if wanted[0] {
                    let d = g
                        .iter()
                        .zip(out.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    grads[0] = Some(like(0, d)?);
                }
            }
            Op::Gelu => {
                if wanted[0] {
                    let d = g
                        .iter()
                        .zip(inputs[0].data())
                        .map(|(gv, &x)| gv * gelu_grad(x))
                        .collect();
                    grads[0] = Some(like(0, d)?);
                }
            }
            Op::Embedding { ids } => {
                if wanted[0] {
                    let (vocab, hidden) = inputs[0].dims2();
                    let mut dt = vec![0.0; vocab * hidden];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..hidden {
                            dt[id * hidden + c] += g[r * hidden + c];
                        }
                    }
                    grads[0] = Some(like(0, dt)?);
                }
            }
            Op::LayerNorm { eps } => {
                let (x, gain) = (inputs[0], inputs[1]);
                let (m, h) = x.dims2();
                let gd = gain.data();
                let mut dx = vec![0.0; if wanted[0] { m * h } else { 0 }];
                let mut dgain = vec![0.0; h];
                for r in 0..m {
                    let (xhat, rstd) = normalize_row(&x.data()[r * h..(r + 1) * h], *eps);
                    let gr = &g[r * h..(r + 1) * h];
                    for c in 0..h {
                        dgain[c] += gr[c] * xhat[c];
                    }
                    if wanted[0] {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..h {
                            let d = gr[c] * gd[c];
                            mean_d += d;
                            mean_dx += d * xhat[c];
                        }
                        mean_d /= h as f64;
                        mean_dx /= h as f64;
                        for c in 0..h {
                            let d = gr[c] * gd[c];
                            dx[r * h + c] = rstd * (d - mean_d - xhat[c] * mean_dx);
                        }
                    }
                }
                if wanted[0] {
                    grads[0] = Some(like(0, dx)?);
                }
                if wanted[1] {
                    grads[1] = Some(like(1, dgain)?);
                }
            }
            Op::Attention { batch, seq, heads } => {
                let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
                let (rows, hidden) = q.dims2();
                let geo = AttnGeometry::new(*batch, *seq, *heads, hidden);
                let (qd, kd, vd) = (q.data(), k.data(), v.data());
                let mut dq = vec![0.0; rows * hidden];
                let mut dk = vec![0.0; rows * hidden];
                let mut dv = vec![0.0; rows * hidden];
                let s = *seq;
                for b in 0..*batch {
                    for hd in 0..*heads {
                        let probs = geo.probs(qd, kd, b, hd);
                        // dP_ij = dout_i . v_j
                        let mut dp = vec![0.0; s * s];
                        for i in 0..s {
                            for j in 0..s {
                                let mut acc = 0.0;
                                for c in 0..geo.head_dim {
                                    acc += g[geo.idx(b, i, hd, c)] * vd[geo.idx(b, j, hd, c)];
                                }
                                dp[i * s + j] = acc;
                            }
                        }
                        // dV_j = sum_i P_ij dout_i
                        for j in 0..s {
                            for c in 0..geo.head_dim {
                                let mut acc = 0.0;
                                for i in 0..s {
                                    acc += probs[i * s + j] * g[geo.idx(b, i, hd, c)];
                                }
                                dv[geo.idx(b, j, hd, c)] = acc;
                            }
                        }
                        // dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik)
                        let mut ds = vec![0.0; s * s];
                        for i in 0..s {
                            let mut dot = 0.0;
                            for j in 0..s {
                                dot += probs[i * s + j] * dp[i * s + j];
                            }
                            for j in 0..s {
                                ds[i * s + j] = probs[i * s + j] * (dp[i * s + j] - dot) * geo.scale;
                            }
                        }
                        for i in 0..s {
                            for c in 0..geo.head_dim {
                                let mut acc = 0.0;
                                for j in 0..s {
                                    acc += ds[i * s + j] * kd[geo.idx(b, j, hd, c)];
                                }
                                dq[geo.idx(b, i, hd, c)] = acc;
                            }
                        }
                        for j in 0..s {
                            for c in 0..geo.head_dim {
                                let mut acc = 0.0;
                                for i in 0..s {
                                    acc += ds[i * s + j] * qd[geo.idx(b, i, hd, c)];
                                }
                                dk[geo.idx(b, j, hd, c)] = acc;
                            }
                        }
                    }
                }
                for (i, d) in [dq, dk, dv].into_iter().enumerate() {
                    if wanted[i] {
                        grads[i] = Some(like(i, d)?);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { targets } => {
                if wanted[0] {
                    let logits = inputs[0];
                    let (m, vocab) = logits.dims2();
                    let scale = g[0] / m as f64;
                    let mut dz = vec![0.0; m * vocab];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &logits.data()[r * vocab..(r + 1) * vocab];
                        let lse = log_sum_exp(row);
                        for c in 0..vocab {
                            let p = (row[c] - lse).exp();
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            dz[r * vocab + c] = scale * (p - onehot);
                        }
                    }
                    grads[0] = Some(like(0, dz)?);
                }
            }
            Op::SquaredError { target } => {
                if wanted[0] {
                    let pred = inputs[0];
                    let (m, _) = pred.dims2();
                    let scale = g[0] / m as f64;
                    let d = pred
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(y, t)| scale * (y - t))
                        .collect();
                    grads[0] = Some(like(0, d)?);
                }
            }
        }
        Ok(grads)
    }
}

fn mismatch(op: &'static str, expected: Vec<usize>, got: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected,
        got: got.to_vec(),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum = row.iter().fold(0.0, |acc, &z| acc + (z - max).exp());
    max + sum.ln()
}

/// Returns the normalized row and `1/sqrt(var + eps)`.
fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let h = row.len() as f64;
    let mean = row.iter().fold(0.0, |a, &v| a + v) / h;
    let var = row.iter().fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / h;
    let rstd = 1.0 / (var + eps).sqrt();
    (row.iter().map(|&v| (v - mean) * rstd).collect(), rstd)
}

struct AttnGeometry {
    seq: usize,
    heads: usize,
    head_dim: usize,
    hidden: usize,
    scale: f64,
}

impl AttnGeometry {
    fn new(_batch: usize, seq: usize, heads: usize, hidden: usize) -> Self {
        let head_dim = hidden / heads;
        AttnGeometry {
            seq,
            heads,
            head_dim,
            hidden,
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }

    #[inline]
    fn idx(&self, b: usize, t: usize, head: usize, c: usize) -> usize {
        debug_assert!(head < self.heads);
        (b * self.seq + t) * self.hidden + head * self.head_dim + c
    }

    /// Row-softmax of scaled scores for one (batch, head) pair.
    fn probs(&self, q: &[f64], k: &[f64], b: usize, head: usize) -> Vec<f64> {
        let s = self.seq;
        let mut p = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                let mut acc = 0.0;
                for c in 0..self.head_dim {
                    acc += q[self.idx(b, i, head, c)] * k[self.idx(b, j, head, c)];
                }
                p[i * s + j] = acc * self.scale;
            }
            let row = &mut p[i * s..(i + 1) * s];
            let lse = log_sum_exp(row);
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec(), Precision::Full).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let y = Op::MatMul.forward(&[&a, &b], Precision::Full).unwrap();
        assert_eq!(y.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 1], &[0.0; 2]);
        let err = Op::MatMul.forward(&[&a, &b], Precision::Full).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let z = t(&[2, 4], &[0.0; 8]);
        let loss = Op::SoftmaxCrossEntropy { targets: vec![0, 3] }
            .forward(&[&z], Precision::Full)
            .unwrap();
        assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn squared_error_matches_hand_value() {
        let y = t(&[1, 1], &[6.0]);
        let op = Op::SquaredError { target: t(&[1, 1], &[0.0]) };
        assert_eq!(op.forward(&[&y], Precision::Full).unwrap().item(), 18.0);
        let g = op
            .backward(&[&y], &Tensor::scalar(18.0), &Tensor::scalar(1.0), &[true])
            .unwrap();
        assert_eq!(g[0].as_ref().unwrap().item(), 6.0);
    }

    #[test]
    fn layer_norm_rows_are_normalized() {
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let gain = t(&[4], &[1.0; 4]);
        let y = Op::LayerNorm { eps: 0.0 }
            .forward(&[&x, &gain], Precision::Full)
            .unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-15);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let table = t(&[3, 2], &[0.0; 6]);
        let op = Op::Embedding { ids: vec![3] };
        assert!(op.forward(&[&table], Precision::Full).is_err());
    }
}
