//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! The tape records every forward operation in construction order together
//! with whatever the backward rule needs. `backprop` walks the records in
//! reverse once; a second backward pass on the same tape is rejected.
//!
//! The operator set is fixed to what the toy vision-language model needs.
//! There is no broadcasting beyond bias-add, no higher-order derivatives and
//! no graph rewriting.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;
const NEG_INF: f64 = f64::NEG_INFINITY;

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// How a leaf participates in differentiation. `Param` and `Input` leaves
/// receive gradients under their name; constants do not.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafKey {
    Param(String),
    Input(String),
    Const,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(LeafKey),
    /// (m,k) @ (k,n)
    MatMul { a: ValueId, b: ValueId },
    /// (m,k) @ (n,k)^T — linear layers store weights as (out, in)
    MatMulNT { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    /// (m,n) + row vector (n), broadcast over rows
    AddBias { a: ValueId, bias: ValueId },
    /// elementwise product, same shape
    Mul { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: f64 },
    Relu { a: ValueId },
    Gelu { a: ValueId },
    /// row-wise softmax; `causal` restricts row i to columns 0..=i
    RowSoftmax { a: ValueId, causal: bool },
    /// row-wise layer norm with learned gain and bias
    LayerNorm { a: ValueId, gain: ValueId, bias: ValueId },
    /// rows of `table` selected by constant ids
    Embed { table: ValueId, ids: Vec<usize> },
    ConcatRows { a: ValueId, b: ValueId },
    ConcatCols { a: ValueId, b: ValueId },
    SliceCols { a: ValueId, start: usize, len: usize },
    /// (c,h,w) image -> (patches, c*p*p) rows, patch-grid row-major
    Patchify { a: ValueId, patch: usize },
    /// mean token cross-entropy of `logits` rows `positions` against `targets`
    CrossEntropy {
        logits: ValueId,
        positions: Vec<usize>,
        targets: Vec<u32>,
    },
    /// sum of all entries -> scalar
    Sum { a: ValueId },
}

struct Node {
    op: Op,
    out: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by leaf name, split by leaf kind.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub params: GradMap,
    pub inputs: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn input(&self, name: &str) -> Option<&Tensor> {
        self.inputs.get(name)
    }
}

/// The recorded forward graph. Nodes are topologically ordered by
/// construction; every operation's inputs precede it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].out
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.nodes[id.0].out.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, out: Tensor, requires_grad: bool) -> ValueId {
        self.nodes.push(Node {
            op,
            out,
            requires_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    pub fn param(&mut self, name: &str, tensor: Tensor) -> ValueId {
        self.push(Op::Leaf(LeafKey::Param(name.to_string())), tensor, true)
    }

    pub fn input(&mut self, name: &str, tensor: Tensor) -> ValueId {
        self.push(Op::Leaf(LeafKey::Input(name.to_string())), tensor, true)
    }

    pub fn constant(&mut self, tensor: Tensor) -> ValueId {
        self.push(Op::Leaf(LeafKey::Const), tensor, false)
    }

    // ── Operators ────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul lhs")?;
        let (kb, n) = dims2(tb, "matmul rhs")?;
        if k != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul: ({m},{k}) @ ({kb},{n})"
            )));
        }
        let out = mat_mul(ta.data(), m, k, tb.data(), n);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.finish(Op::MatMul { a, b }, vec![m, n], out, rg, "matmul")
    }

    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2(ta, "matmul_nt lhs")?;
        let (n, kb) = dims2(tb, "matmul_nt rhs")?;
        if k != kb {
            return Err(Error::ShapeMismatch(format!(
                "matmul_nt: ({m},{k}) @ ({n},{kb})^T"
            )));
        }
        let out = mat_mul_nt(ta.data(), m, k, tb.data(), n);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.finish(Op::MatMulNT { a, b }, vec![m, n], out, rg, "matmul_nt")
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.finish(Op::Add { a, b }, shape, out, rg, "add")
    }

    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = dims2(ta, "add_bias lhs")?;
        if tb.shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "add_bias: ({m},{n}) + {:?}",
                tb.shape()
            )));
        }
        let mut out = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tb.data()[j];
            }
        }
        let rg = self.needs_grad(a) || self.needs_grad(bias);
        self.finish(Op::AddBias { a, bias }, vec![m, n], out, rg, "add_bias")
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::ShapeMismatch(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.finish(Op::Mul { a, b }, shape, out, rg, "mul")
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a);
        self.finish(Op::Scale { a, c }, shape, out, rg, "scale")
    }

    pub fn relu(&mut self, a: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a);
        self.finish(Op::Relu { a }, shape, out, rg, "relu")
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.needs_grad(a);
        self.finish(Op::Gelu { a }, shape, out, rg, "gelu")
    }

    pub fn row_softmax(&mut self, a: ValueId, causal: bool) -> Result<ValueId> {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "row_softmax")?;
        if causal && m != n {
            return Err(Error::ShapeMismatch(format!(
                "causal softmax requires a square matrix, got ({m},{n})"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let limit = if causal { i + 1 } else { n };
            let row = &ta.data()[i * n..i * n + limit];
            softmax_into(row, &mut out[i * n..i * n + limit]);
        }
        let rg = self.needs_grad(a);
        self.finish(Op::RowSoftmax { a, causal }, vec![m, n], out, rg, "row_softmax")
    }

    pub fn layer_norm(&mut self, a: ValueId, gain: ValueId, bias: ValueId) -> Result<ValueId> {
        let (ta, tg, tb) = (self.value(a), self.value(gain), self.value(bias));
        let (m, n) = dims2(ta, "layer_norm")?;
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::ShapeMismatch(format!(
                "layer_norm: ({m},{n}) with gain {:?}, bias {:?}",
                tg.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.data()[i * n..(i + 1) * n];
            let (mu, inv_std) = norm_stats(row);
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * inv_std * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.needs_grad(a) || self.needs_grad(gain) || self.needs_grad(bias);
        self.finish(Op::LayerNorm { a, gain, bias }, vec![m, n], out, rg, "layer_norm")
    }

    pub fn embed(&mut self, table: ValueId, ids: &[u32]) -> Result<ValueId> {
        let tt = self.value(table);
        let (v, d) = dims2(tt, "embed table")?;
        let mut idx = Vec::with_capacity(ids.len());
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return Err(Error::ShapeMismatch(format!(
                    "embed: id {id} out of range for table with {v} rows"
                )));
            }
            idx.push(id);
        }
        if idx.is_empty() {
            return Err(Error::ShapeMismatch("embed: empty id list".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &id in &idx {
            out.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let rg = self.needs_grad(table);
        let rows = idx.len();
        self.finish(Op::Embed { table, ids: idx }, vec![rows, d], out, rg, "embed")
    }

    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ma, n) = dims2(ta, "concat_rows lhs")?;
        let (mb, nb) = dims2(tb, "concat_rows rhs")?;
        if n != nb {
            return Err(Error::ShapeMismatch(format!(
                "concat_rows: widths {n} vs {nb}"
            )));
        }
        let mut out = Vec::with_capacity((ma + mb) * n);
        out.extend_from_slice(ta.data());
        out.extend_from_slice(tb.data());
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.finish(Op::ConcatRows { a, b }, vec![ma + mb, n], out, rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, na) = dims2(ta, "concat_cols lhs")?;
        let (mb, nb) = dims2(tb, "concat_cols rhs")?;
        if m != mb {
            return Err(Error::ShapeMismatch(format!(
                "concat_cols: heights {m} vs {mb}"
            )));
        }
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&ta.data()[i * na..(i + 1) * na]);
            out.extend_from_slice(&tb.data()[i * nb..(i + 1) * nb]);
        }
        let rg = self.needs_grad(a) || self.needs_grad(b);
        self.finish(Op::ConcatCols { a, b }, vec![m, na + nb], out, rg, "concat_cols")
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let ta = self.value(a);
        let (m, n) = dims2(ta, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols: [{start}..{}) of width {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&ta.data()[i * n + start..i * n + start + len]);
        }
        let rg = self.needs_grad(a);
        self.finish(Op::SliceCols { a, start, len }, vec![m, len], out, rg, "slice_cols")
    }

    pub fn patchify(&mut self, a: ValueId, patch: usize) -> Result<ValueId> {
        let ta = self.value(a);
        let shape = ta.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "patchify expects (channels, h, w), got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::ShapeMismatch(format!(
                "patchify: {h}x{w} not divisible by patch {patch}"
            )));
        }
        let (gh, gw) = (h / patch, w / patch);
        let dim = c * patch * patch;
        let mut out = Vec::with_capacity(gh * gw * dim);
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            let y = py * patch + dy;
                            let x = px * patch + dx;
                            out.push(ta.data()[ch * h * w + y * w + x]);
                        }
                    }
                }
            }
        }
        let rg = self.needs_grad(a);
        self.finish(Op::Patchify { a, patch }, vec![gh * gw, dim], out, rg, "patchify")
    }

    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        positions: &[usize],
        targets: &[u32],
    ) -> Result<ValueId> {
        let tl = self.value(logits);
        let (m, v) = dims2(tl, "cross_entropy logits")?;
        if positions.is_empty() || positions.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross_entropy: {} positions vs {} targets",
                positions.len(),
                targets.len()
            )));
        }
        for (&p, &t) in positions.iter().zip(targets) {
            if p >= m || t as usize >= v {
                return Err(Error::ShapeMismatch(format!(
                    "cross_entropy: position {p} / target {t} out of range ({m} rows, {v} classes)"
                )));
            }
        }
        let mut total = 0.0;
        for (&p, &t) in positions.iter().zip(targets) {
            let row = &tl.data()[p * v..(p + 1) * v];
            total += log_sum_exp(row) - row[t as usize];
        }
        let loss = total / positions.len() as f64;
        let rg = self.needs_grad(logits);
        self.finish(
            Op::CrossEntropy {
                logits,
                positions: positions.to_vec(),
                targets: targets.to_vec(),
            },
            vec![1],
            vec![loss],
            rg,
            "cross_entropy",
        )
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.needs_grad(a);
        self.finish(Op::Sum { a }, vec![1], vec![total], rg, "sum")
    }

    fn finish(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        what: &str,
    ) -> Result<ValueId> {
        let out = Tensor::new(shape, data)
            .map_err(|_| Error::NonFinite(format!("output of {what}")))?;
        Ok(self.push(op, out, requires_grad))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar root. Fills the grad buffers of all
    /// differentiable leaves and returns the gradients keyed by leaf name.
    /// Consumes the tape for differentiation purposes; values stay readable.
    pub fn backprop(&mut self, root: ValueId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let root_tensor = self.value(root);
        if !root_tensor.is_scalar() {
            return Err(Error::NonScalarRoot(root_tensor.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf(_) => {
                    grads[i] = Some(g); // keep for extraction below
                }
                Op::MatMul { a, b } => {
                    let (m, k) = mat_dims(self.value(a));
                    let n = self.value(b).cols();
                    if self.needs_grad(a) {
                        // da = g @ b^T
                        let da = mat_mul_nt(&g, m, n, self.value(b).data(), k);
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs_grad(b) {
                        // db = a^T @ g
                        let db = mat_mul_tn(self.value(a).data(), m, k, &g, n);
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::MatMulNT { a, b } => {
                    let (m, k) = mat_dims(self.value(a));
                    let n = self.value(b).rows();
                    if self.needs_grad(a) {
                        // da = g @ b
                        let da = mat_mul(&g, m, n, self.value(b).data(), k);
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs_grad(b) {
                        // db = g^T @ a
                        let db = mat_mul_tn(&g, m, n, self.value(a).data(), k);
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.needs_grad(a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs_grad(b) {
                        accumulate(&mut grads[b.0], &g);
                    }
                }
                Op::AddBias { a, bias } => {
                    if self.needs_grad(a) {
                        accumulate(&mut grads[a.0], &g);
                    }
                    if self.needs_grad(bias) {
                        let (m, n) = mat_dims(self.value(a));
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += g[i * n + j];
                            }
                        }
                        accumulate(&mut grads[bias.0], &db);
                    }
                }
                Op::Mul { a, b } => {
                    if self.needs_grad(a) {
                        let da: Vec<f64> =
                            g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs_grad(b) {
                        let db: Vec<f64> =
                            g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::Scale { a, c } => {
                    let da: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Relu { a } => {
                    // subgradient at 0 is 0
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Gelu { a } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gv, &x)| gv * gelu_bwd(x))
                        .collect();
                    accumulate(&mut grads[a.0], &da);
                }
                Op::RowSoftmax { a, causal } => {
                    // dx = p * (g - <g, p>) per row
                    let out = self.value(ValueId(i));
                    let (m, n) = mat_dims(out);
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        let limit = if causal { r + 1 } else { n };
                        let p = &out.data()[r * n..r * n + limit];
                        let gr = &g[r * n..r * n + limit];
                        let dot: f64 = p.iter().zip(gr).map(|(pv, gv)| pv * gv).sum();
                        for j in 0..limit {
                            da[r * n + j] = p[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::LayerNorm { a, gain, bias } => {
                    let (m, n) = mat_dims(self.value(a));
                    let x = self.value(a).data();
                    let gamma = self.value(gain).data();
                    let mut da = vec![0.0; m * n];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for r in 0..m {
                        let row = &x[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let (mu, inv_std) = norm_stats(row);
                        let mut mean_gy = 0.0;
                        let mut mean_gy_nh = 0.0;
                        let mut nh = vec![0.0; n];
                        for j in 0..n {
                            nh[j] = (row[j] - mu) * inv_std;
                            let gy = gr[j] * gamma[j];
                            mean_gy += gy;
                            mean_gy_nh += gy * nh[j];
                        }
                        mean_gy /= n as f64;
                        mean_gy_nh /= n as f64;
                        for j in 0..n {
                            let gy = gr[j] * gamma[j];
                            da[r * n + j] = (gy - mean_gy - nh[j] * mean_gy_nh) * inv_std;
                            dgain[j] += gr[j] * nh[j];
                            dbias[j] += gr[j];
                        }
                    }
                    if self.needs_grad(a) {
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs_grad(gain) {
                        accumulate(&mut grads[gain.0], &dgain);
                    }
                    if self.needs_grad(bias) {
                        accumulate(&mut grads[bias.0], &dbias);
                    }
                }
                Op::Embed { table, ids } => {
                    let d = self.value(table).cols();
                    let rows = self.value(table).rows();
                    let mut dt = vec![0.0; rows * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], &dt);
                }
                Op::ConcatRows { a, b } => {
                    let la = self.value(a).len();
                    if self.needs_grad(a) {
                        accumulate(&mut grads[a.0], &g[..la]);
                    }
                    if self.needs_grad(b) {
                        accumulate(&mut grads[b.0], &g[la..]);
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (m, na) = mat_dims(self.value(a));
                    let nb = self.value(b).cols();
                    if self.needs_grad(a) {
                        let mut da = vec![0.0; m * na];
                        for r in 0..m {
                            da[r * na..(r + 1) * na]
                                .copy_from_slice(&g[r * (na + nb)..r * (na + nb) + na]);
                        }
                        accumulate(&mut grads[a.0], &da);
                    }
                    if self.needs_grad(b) {
                        let mut db = vec![0.0; m * nb];
                        for r in 0..m {
                            db[r * nb..(r + 1) * nb]
                                .copy_from_slice(&g[r * (na + nb) + na..(r + 1) * (na + nb)]);
                        }
                        accumulate(&mut grads[b.0], &db);
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let (m, n) = mat_dims(self.value(a));
                    let mut da = vec![0.0; m * n];
                    for r in 0..m {
                        for j in 0..len {
                            da[r * n + start + j] = g[r * len + j];
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::Patchify { a, patch } => {
                    let shape = self.value(a).shape().to_vec();
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (gh, gw) = (h / patch, w / patch);
                    let mut da = vec![0.0; c * h * w];
                    let mut src = 0;
                    for py in 0..gh {
                        for px in 0..gw {
                            for ch in 0..c {
                                for dy in 0..patch {
                                    for dx in 0..patch {
                                        let y = py * patch + dy;
                                        let x = px * patch + dx;
                                        da[ch * h * w + y * w + x] = g[src];
                                        src += 1;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], &da);
                }
                Op::CrossEntropy {
                    logits,
                    positions,
                    targets,
                } => {
                    let (m, v) = mat_dims(self.value(logits));
                    let scale = g[0] / positions.len() as f64;
                    let mut dl = vec![0.0; m * v];
                    let data = self.value(logits).data();
                    for (&p, &t) in positions.iter().zip(&targets) {
                        let row = &data[p * v..(p + 1) * v];
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            dl[p * v + j] += scale * (row[j] - lse).exp();
                        }
                        dl[p * v + t as usize] -= scale;
                    }
                    accumulate(&mut grads[logits.0], &dl);
                }
                Op::Sum { a } => {
                    let da = vec![g[0]; self.value(a).len()];
                    accumulate(&mut grads[a.0], &da);
                }
            }
        }

        // Extract by leaf name; differentiable leaves off the root's path get
        // explicit zeros.
        let mut result = Gradients::default();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let Op::Leaf(key) = &node.op {
                let grad = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.out.len()]);
                let tensor = Tensor::new(node.out.shape().to_vec(), grad.clone())
                    .map_err(|_| Error::NonFinite(format!("gradient of leaf {i}")))?;
                match key {
                    LeafKey::Param(name) => {
                        node.out.set_grad(grad);
                        result.params.insert(name.clone(), tensor);
                    }
                    LeafKey::Input(name) => {
                        node.out.set_grad(grad);
                        result.inputs.insert(name.clone(), tensor);
                    }
                    LeafKey::Const => {}
                }
            }
        }
        Ok(result)
    }
}

// ── Kernels ──────────────────────────────────────────────────────────────

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.rows(), t.cols()))
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// (m,k) @ (k,n), ikj order.
fn mat_mul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// (m,k) @ (n,k)^T — both operands scanned row-major.
fn mat_mul_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// (m,k)^T @ (m,n) -> (k,n).
fn mat_mul_tn(a: &[f64], m: usize, k: usize, g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
    out
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().fold(NEG_INF, |m, &v| m.max(v));
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(NEG_INF, |m, &v| m.max(v));
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

fn norm_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

// ── Finite differences ───────────────────────────────────────────────────

/// Central-difference gradient of a scalar function of a `ParamStore`,
/// coordinate by coordinate. The test-side oracle for `backprop`; it never
/// touches the tape.
pub fn finite_difference_gradient<F>(f: F, params: &ParamStore, step: f64) -> Result<GradMap>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "finite difference step must be positive, got {step}"
        )));
    }
    let mut scratch = params.clone();
    let mut out = GradMap::new();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let len = params.get(&name)?.len();
        let shape = params.get(&name)?.shape().to_vec();
        let mut grad = vec![0.0; len];
        for i in 0..len {
            let orig = scratch.get(&name)?.data()[i];
            scratch.get_mut(&name)?.data_mut()[i] = orig + step;
            let plus = f(&scratch)?;
            scratch.get_mut(&name)?.data_mut()[i] = orig - step;
            let minus = f(&scratch)?;
            scratch.get_mut(&name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference of {name} at coordinate {i}"
                )));
            }
            grad[i] = (plus - minus) / (2.0 * step);
        }
        out.insert(name.clone(), Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// Relative error with an absolute floor, shared by all gradient checks.
pub fn grad_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient() {
        // root = sum(w ⊙ w), w = [1, -2, 3] -> grad 2w
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let root = tape.sum(sq).unwrap();
        assert_eq!(tape.scalar_value(root), 1.0 + 4.0 + 9.0);
        let grads = tape.backprop(root).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn constant_root_gives_zero_grads() {
        let mut tape = Tape::new();
        let _unused = tape.param("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let c = tape.param("c", Tensor::scalar(5.0));
        let root = tape.sum(c).unwrap();
        let grads = tape.backprop(root).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.param("c").unwrap().data(), &[1.0]);
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store.insert(
            "w1",
            Group::Mlp,
            Tensor::from_fn(vec![4, 5], |_| rng.random::<f64>() - 0.5),
        );
        store.insert(
            "w2",
            Group::Mlp,
            Tensor::from_fn(vec![5, 3], |_| rng.random::<f64>() - 0.5),
        );
        let x = Tensor::from_fn(vec![2, 4], |_| rng.random::<f64>() * 2.0 - 1.0);

        let run = |p: &ParamStore| -> Result<(f64, Option<Gradients>)> {
            let mut tape = Tape::new();
            let w1 = tape.param("w1", p.get("w1")?.clone());
            let w2 = tape.param("w2", p.get("w2")?.clone());
            let xin = tape.constant(x.clone());
            let h = tape.matmul(xin, w1)?;
            let h = tape.gelu(h)?;
            let y = tape.matmul(h, w2)?;
            let root = tape.sum(y)?;
            let v = tape.scalar_value(root);
            let g = tape.backprop(root)?;
            Ok((v, Some(g)))
        };

        let (_, grads) = run(&store).unwrap();
        let grads = grads.unwrap();
        let fd = finite_difference_gradient(|p| run(p).map(|(v, _)| v), &store, 1e-4).unwrap();
        for (name, fd_grad) in &fd {
            for (&a, &f) in grads.param(name).unwrap().data().iter().zip(fd_grad.data()) {
                assert!(
                    grad_rel_err(a, f) < 1e-4,
                    "{name}: backprop {a} vs finite difference {f}"
                );
            }
        }
    }

    #[test]
    fn repeated_backward_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::scalar(2.0));
        let root = tape.sum(w).unwrap();
        tape.backprop(root).unwrap();
        assert!(matches!(tape.backprop(root), Err(Error::GraphConsumed)));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            tape.backprop(w),
            Err(Error::NonScalarRoot(_))
        ));
    }

    #[test]
    fn forward_and_gradients_are_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let a = tape.param(
                "a",
                Tensor::from_fn(vec![3, 3], |_| rng.random::<f64>() - 0.5),
            );
            let b = tape.param(
                "b",
                Tensor::from_fn(vec![3, 3], |_| rng.random::<f64>() - 0.5),
            );
            let prod = tape.matmul(a, b).unwrap();
            let soft = tape.row_softmax(prod, true).unwrap();
            let root = tape.sum(soft).unwrap();
            let v = tape.scalar_value(root);
            let g = tape.backprop(root).unwrap();
            (v, g)
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (name, t1) in &g1.params {
            let t2 = g2.param(name).unwrap();
            for (x, y) in t1.data().iter().zip(t2.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn leaf_grad_buffers_filled() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let root = tape.sum(sq).unwrap();
        tape.backprop(root).unwrap();
        assert_eq!(tape.value(w).grad().unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn fd_quadratic_and_linear_examples() {
        let mut store = ParamStore::new();
        store.insert("theta", Group::Mlp, Tensor::scalar(3.0));
        // f = theta^2 at theta = 3, h = 1e-4 -> 6.0
        let fd = finite_difference_gradient(
            |p| Ok(p.get("theta")?.data()[0].powi(2)),
            &store,
            1e-4,
        )
        .unwrap();
        assert!((fd["theta"].data()[0] - 6.0).abs() < 1e-6);
        // linear slope c is recovered exactly; dyadic steps keep the float
        // arithmetic itself exact, other steps only add rounding noise
        for h in [2.0, 0.5, 0.015625] {
            let fd = finite_difference_gradient(
                |p| Ok(-2.5 * p.get("theta")?.data()[0] + 1.0),
                &store,
                h,
            )
            .unwrap();
            assert_eq!(fd["theta"].data()[0], -2.5);
        }
        for h in [1e-1, 1e-4, 1e-7] {
            let fd = finite_difference_gradient(
                |p| Ok(-2.5 * p.get("theta")?.data()[0] + 1.0),
                &store,
                h,
            )
            .unwrap();
            assert!((fd["theta"].data()[0] - -2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_reports_non_finite_coordinate() {
        let mut store = ParamStore::new();
        store.insert("theta", Group::Mlp, Tensor::scalar(0.0));
        let err = finite_difference_gradient(
            |p| Ok(1.0 / p.get("theta")?.data()[0].max(0.0).sqrt() * 0.0 + f64::NAN),
            &store,
            1e-4,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("theta") && msg.contains("coordinate 0"), "{msg}");
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_over_prefix() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(vec![4, 4], |i| (i as f64) * 0.3 - 1.0));
        let s = tape.row_softmax(a, true).unwrap();
        let out = tape.value(s);
        for i in 0..4 {
            let row = out.row(i);
            let active: f64 = row[..=i].iter().sum();
            assert!((active - 1.0).abs() < 1e-12);
            for &v in &row[i + 1..] {
                assert_eq!(v, 0.0);
            }
        }
    }
}
