//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to compute the vector-Jacobian product. [`Tape::backward`] walks the
//! nodes in exact reverse recording order and returns one gradient buffer per
//! trainable parameter of a [`ParamStore`], zero-filled for parameters the
//! loss never touched.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Stable identifier of a trainable parameter, assigned in construction order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub id: ParamId,
    pub path: String,
    pub value: Tensor<T>,
}

/// Ordered collection of trainable parameters. The flat gradient layout of a
/// model is the concatenation of its parameters in this order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, path: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.params.len() as u32);
        self.params.push(Param {
            id,
            path: path.into(),
            value,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0 as usize]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0 as usize].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Concatenates per-parameter gradients into one flat vector in store order.
    pub fn flatten(&self, grads: &Gradients<T>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for p in &self.params {
            match grads.get(p.id) {
                Some(g) => out.extend(g.iter().map(|v| v.widen())),
                None => out.extend(std::iter::repeat_n(0.0, p.value.numel())),
            }
        }
        out
    }

    /// Concatenates all parameter values in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.widen()))
            .collect()
    }

    /// In-place `θ ← θ − lr · direction` over the flat layout.
    pub fn descend(&mut self, direction: &[f64], lr: f64) -> Result<()> {
        if direction.len() != self.numel() {
            return Err(Error::Length {
                op: "descend",
                expected: self.numel(),
                actual: direction.len(),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            for (v, d) in p.value.data_mut().iter_mut().zip(&direction[offset..offset + n]) {
                *v = T::from_f64(v.widen() - lr * d);
            }
            offset += n;
        }
        Ok(())
    }
}

/// Gradients keyed by parameter, one buffer per parameter of the store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    by_param: BTreeMap<ParamId, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.by_param.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Sum,
    Relu,
    Gelu,
    EmbeddingLookup,
    LayerNorm,
    Softmax,
    ScaledDotAttention,
    CrossEntropyLoss,
    MseLoss,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf(_) => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) | Op::AddRow(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Embedding { .. } => OpKind::EmbeddingLookup,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Attention { .. } => OpKind::ScaledDotAttention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropyLoss,
            Op::Mse { .. } => OpKind::MseLoss,
        }
    }
}

/// Shape of a batched multi-head attention call.
///
/// Queries hold `batch · q_len` rows and keys/values `batch · kv_len` rows;
/// the feature dimension is split evenly into `heads` heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub causal: bool,
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Kinds of all recorded operations, in recording order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(None))
    }

    /// Records a trainable parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta
            .dims2()
            .ok_or_else(|| shape_err("matmul", format!("lhs {:?} is not rank 2", ta.shape())))?;
        let (k2, n) = tb
            .dims2()
            .ok_or_else(|| shape_err("matmul", format!("rhs {:?} is not rank 2", tb.shape())))?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Elementwise sum. A rank-1 right operand of length `cols` is broadcast
    /// across the rows of a rank-2 left operand.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
            let value = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(value, Op::Add(a, b)));
        }
        match (ta.dims2(), tb.shape()) {
            (Some((_, cols)), [n]) if *n == cols => {
                let data = ta
                    .data()
                    .chunks(cols)
                    .flat_map(|row| row.iter().zip(tb.data()).map(|(x, y)| *x + *y))
                    .collect();
                let value = Tensor::new(ta.shape().to_vec(), data)?;
                Ok(self.push(value, Op::AddRow(a, b)))
            }
            _ => Err(shape_err(
                "add",
                format!("cannot add {:?} and {:?}", ta.shape(), tb.shape()),
            )),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("cannot multiply {:?} and {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let ta = self.value(a);
        let value = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| *x * c).collect())
            .expect("same shape");
        self.push(value, Op::Scale(a, c))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, x| acc + *x);
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(T::zero())).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| gelu(*x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a))
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, dim) = tt.dims2().ok_or_else(|| {
            shape_err("embedding_lookup", format!("table {:?} is not rank 2", tt.shape()))
        })?;
        if ids.is_empty() {
            return Err(shape_err("embedding_lookup", "no ids".into()));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(shape_err(
                "embedding_lookup",
                format!("id {bad} out of range for table {:?}", tt.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tt.data()[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes each row of `x` and applies per-feature `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.last_dim();
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?} needs scale/shift [{n}], got {:?} and {:?}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape()
                ),
            ));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let rows = tx.numel() / n;
        let mut out = Vec::with_capacity(tx.numel());
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in tx.data().chunks(n) {
            let mean = row.iter().fold(T::zero(), |a, v| a + *v) / nf;
            let var = row.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.last_dim();
        let mut out = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks(n) {
            softmax_row(row, &mut out);
        }
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Softmax(a))
    }

    /// Batched multi-head scaled dot-product attention, scaling `1/√d_head`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let AttentionLayout {
            heads,
            q_len,
            kv_len,
            causal,
        } = layout;
        let err = |detail: String| shape_err("scaled_dot_attention", detail);
        let (qr, d) = tq.dims2().ok_or_else(|| err(format!("query {:?} is not rank 2", tq.shape())))?;
        if tk.shape() != tv.shape() || tk.dims2().map(|s| s.1) != Some(d) {
            return Err(err(format!(
                "query {:?}, key {:?}, value {:?} disagree",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        let kr = tk.shape()[0];
        if heads == 0 || d % heads != 0 || q_len == 0 || kv_len == 0 {
            return Err(err(format!("{heads} heads over width {d} with lengths {q_len}/{kv_len}")));
        }
        if qr % q_len != 0 || kr % kv_len != 0 || qr / q_len != kr / kv_len {
            return Err(err(format!(
                "rows {qr}/{kr} do not split into equal batches of {q_len}/{kv_len}"
            )));
        }
        if causal && q_len != kv_len {
            return Err(err(format!("causal attention needs equal lengths, got {q_len}/{kv_len}")));
        }
        let batch = qr / q_len;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * q_len * kv_len];
        let mut out = vec![T::zero(); qr * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = Vec::with_capacity(kv_len);
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..q_len {
                    let qrow = &qd[(b * q_len + i) * d + col..][..dh];
                    scores.clear();
                    for j in 0..kv_len {
                        if causal && j > i {
                            scores.push(T::neg_infinity());
                            continue;
                        }
                        let krow = &kd[(b * kv_len + j) * d + col..][..dh];
                        scores.push(dot(qrow, krow) * scale);
                    }
                    let base = ((b * heads + h) * q_len + i) * kv_len;
                    let p = &mut probs[base..base + kv_len];
                    let mut tmp = Vec::with_capacity(kv_len);
                    softmax_row(&scores, &mut tmp);
                    p.copy_from_slice(&tmp);
                    let orow = &mut out[(b * q_len + i) * d + col..][..dh];
                    for (j, pj) in p.iter().enumerate() {
                        if *pj == T::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * kv_len + j) * d + col..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o = *o + *pj * *vv;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Mean token cross-entropy of `logits` (`[rows, vocab]`) against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = tl.dims2().ok_or_else(|| {
            shape_err("cross_entropy_loss", format!("logits {:?} are not rank 2", tl.shape()))
        })?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy_loss",
                format!("logits {:?} vs {} targets", tl.shape(), targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(shape_err(
                "cross_entropy_loss",
                format!("target {bad} out of range for {vocab} classes"),
            ));
        }
        let mut probs = Vec::with_capacity(tl.numel());
        let mut loss = T::zero();
        for (row, &t) in tl.data().chunks(vocab).zip(targets) {
            let start = probs.len();
            softmax_row(row, &mut probs);
            let max = row.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
            let lse = row.iter().fold(T::zero(), |a, v| a + (*v - max).exp()).ln() + max;
            loss = loss + (lse - row[t]);
            debug_assert_eq!(probs.len() - start, vocab);
        }
        let loss = loss / T::from_f64(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// `½ · mean((pred − target)²)`.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(shape_err(
                "mse_loss",
                format!("prediction {:?} vs target {:?}", tp.shape(), target.shape()),
            ));
        }
        let n = T::from_f64(tp.numel() as f64);
        let half = T::from_f64(0.5);
        let loss = tp
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |a, (p, t)| a + (*p - *t) * (*p - *t))
            * half
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Returns a gradient for every
    /// parameter in `store`; parameters not reached get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore<T>) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut by_param: BTreeMap<ParamId, Vec<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf(Some(id)) => {
                    accumulate(by_param.entry(*id).or_insert_with(|| vec![T::zero(); upstream.len()]), &upstream);
                }
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = ta.dims2().expect("checked in forward");
                    let n = tb.last_dim();
                    let mut da = vec![T::zero(); m * k];
                    let mut db = vec![T::zero(); k * n];
                    // dA = dY · Bᵀ, dB = Aᵀ · dY
                    for i in 0..m {
                        let dy = &upstream[i * n..(i + 1) * n];
                        let arow = &ta.data()[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = dot(dy, brow);
                            let aval = arow[p];
                            if aval != T::zero() {
                                for (d, g) in db[p * n..(p + 1) * n].iter_mut().zip(dy) {
                                    *d = *d + aval * *g;
                                }
                            }
                        }
                    }
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, upstream.clone());
                    send(&mut grads, *b, upstream);
                }
                Op::AddRow(a, b) => {
                    let n = self.value(*b).numel();
                    let mut db = vec![T::zero(); n];
                    for row in upstream.chunks(n) {
                        accumulate(&mut db, row);
                    }
                    send(&mut grads, *a, upstream);
                    send(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = upstream.iter().zip(tb.data()).map(|(g, y)| *g * *y).collect();
                    let db = upstream.iter().zip(ta.data()).map(|(g, x)| *g * *x).collect();
                    send(&mut grads, *a, da);
                    send(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    send(&mut grads, *a, upstream.iter().map(|g| *g * *c).collect());
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    send(&mut grads, *a, vec![upstream[0]; n]);
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    let da = upstream
                        .iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                        .collect();
                    send(&mut grads, *a, da);
                }
                Op::Gelu(a) => {
                    let ta = self.value(*a);
                    let da = upstream.iter().zip(ta.data()).map(|(g, x)| *g * gelu_grad(*x)).collect();
                    send(&mut grads, *a, da);
                }
                Op::Embedding { table, ids } => {
                    let tt = self.value(*table);
                    let dim = tt.last_dim();
                    let mut dt = vec![T::zero(); tt.numel()];
                    for (r, &i) in ids.iter().enumerate() {
                        accumulate(&mut dt[i * dim..(i + 1) * dim], &upstream[r * dim..(r + 1) * dim]);
                    }
                    send(&mut grads, *table, dt);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let tg = self.value(*gamma);
                    let n = tg.numel();
                    let nf = T::from_f64(n as f64);
                    let mut dx = vec![T::zero(); upstream.len()];
                    let mut dgamma = vec![T::zero(); n];
                    let mut dbeta = vec![T::zero(); n];
                    let mut dxhat = vec![T::zero(); n];
                    for (r, (dy, h)) in upstream.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_h = T::zero();
                        for j in 0..n {
                            dgamma[j] = dgamma[j] + dy[j] * h[j];
                            dbeta[j] = dbeta[j] + dy[j];
                            dxhat[j] = dy[j] * tg.data()[j];
                            sum_dxhat = sum_dxhat + dxhat[j];
                            sum_dxhat_h = sum_dxhat_h + dxhat[j] * h[j];
                        }
                        let coeff = rstd[r] / nf;
                        for j in 0..n {
                            dx[r * n + j] = coeff * (nf * dxhat[j] - sum_dxhat - h[j] * sum_dxhat_h);
                        }
                    }
                    send(&mut grads, *x, dx);
                    send(&mut grads, *gamma, dgamma);
                    send(&mut grads, *beta, dbeta);
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let n = node.value.last_dim();
                    let mut da = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(n).zip(upstream.chunks(n)) {
                        let s = dot(yr, gr);
                        da.extend(yr.iter().zip(gr).map(|(yv, gv)| *yv * (*gv - s)));
                    }
                    send(&mut grads, *a, da);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, &upstream);
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                    send(&mut grads, *v, dv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let vocab = self.value(*logits).last_dim();
                    let scale = upstream[0] / T::from_f64(targets.len() as f64);
                    let mut dl: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * vocab + t] = dl[r * vocab + t] - scale;
                    }
                    send(&mut grads, *logits, dl);
                }
                Op::Mse { pred, target } => {
                    let tp = self.value(*pred);
                    let scale = upstream[0] / T::from_f64(tp.numel() as f64);
                    let dp = tp.data().iter().zip(target).map(|(p, t)| (*p - *t) * scale).collect();
                    send(&mut grads, *pred, dp);
                }
            }
        }

        for p in store.iter() {
            match by_param.get(&p.id) {
                Some(g) if g.len() != p.value.numel() => {
                    return Err(Error::Length {
                        op: "backward",
                        expected: p.value.numel(),
                        actual: g.len(),
                    });
                }
                Some(_) => {}
                None => {
                    by_param.insert(p.id, vec![T::zero(); p.value.numel()]);
                }
            }
        }
        Ok(Gradients { by_param })
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[T],
        upstream: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (qr, d) = tq.dims2().expect("checked in forward");
        let AttentionLayout {
            heads,
            q_len,
            kv_len,
            ..
        } = *layout;
        let batch = qr / q_len;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); tq.numel()];
        let mut dk = vec![T::zero(); tk.numel()];
        let mut dv = vec![T::zero(); tv.numel()];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dp = vec![T::zero(); kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..q_len {
                    let base = ((b * heads + h) * q_len + i) * kv_len;
                    let p = &probs[base..base + kv_len];
                    let qi = (b * q_len + i) * d + col;
                    let dout = &upstream[qi..qi + dh];
                    for j in 0..kv_len {
                        let vj = (b * kv_len + j) * d + col;
                        dp[j] = dot(dout, &vd[vj..vj + dh]);
                        if p[j] != T::zero() {
                            for (g, o) in dv[vj..vj + dh].iter_mut().zip(dout) {
                                *g = *g + p[j] * *o;
                            }
                        }
                    }
                    let s = dot(p, &dp);
                    for j in 0..kv_len {
                        let ds = p[j] * (dp[j] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = (b * kv_len + j) * d + col;
                        for c in 0..dh {
                            dq[qi + c] = dq[qi + c] + ds * kd[kj + c];
                            dk[kj + c] = dk[kj + c] + ds * qd[qi + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn send<T: Scalar>(grads: &mut [Option<Vec<T>>], target: Var, g: Vec<T>) {
    match &mut grads[target.0] {
        Some(existing) => accumulate(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aval = a[i * k + p];
            if aval == T::zero() {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + aval * *bv;
            }
        }
    }
}

fn softmax_row<T: Scalar>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |a, v| a.max(*v));
    let start = out.len();
    let mut total = T::zero();
    for v in row {
        let e = (*v - max).exp();
        total = total + e;
        out.push(e);
    }
    for e in &mut out[start..] {
        *e = *e / total;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
