//! Minimal reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape records every forward op in creation order (parents always
//! precede children), so the backward pass is a single reverse sweep.
//! Backward is a pure function of the tape: it never mutates recorded
//! nodes, which lets the per-sample passes run in parallel.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ApamError, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Gradients of a scalar root with respect to the tape's parameter leaves.
pub type GradMap<F> = HashMap<NodeId, Tensor<F>>;

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `A · Bᵀ` where both inputs are rank-2 with equal column counts.
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    MeanRows(NodeId),
    Scale(NodeId, F),
    PowScalar(NodeId, F),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    L2NormalizeRows(NodeId),
    Dropout { input: NodeId, keep: Vec<F> },
    EmbeddingLookup { table: NodeId, indices: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Row(NodeId, usize),
    Pick(NodeId, usize),
}

impl<F: Real> Op<F> {
    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::Scale(a, _)
            | Op::PowScalar(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::L2NormalizeRows(a)
            | Op::Row(a, _)
            | Op::Pick(a, _) => vec![*a],
            Op::Dropout { input, .. } => vec![*input],
            Op::EmbeddingLookup { table, .. } => vec![*table],
            Op::ConcatRows(ids) | Op::Stack(ids) => ids.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    /// True for parameter leaves and anything downstream of one.
    needs_grad: bool,
}

/// Append-only computation graph.
#[derive(Debug, Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    /// Constant leaf; excluded from gradient maps.
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; backward reports its gradient.
    pub fn param(&mut self, value: Tensor<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn record(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        let needs = op.parents().iter().any(|&p| self.nodes[p].needs_grad);
        self.push(value, op, needs)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.shape() != vb.shape() {
            return Err(ApamError::Shape {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(data, va.shape().to_vec())?;
        Ok(self.record(value, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Matrix product. Accepts (m×k)·(k×n) → m×n and (k)·(k×n) → (n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (m, k) = lhs_dims(va).ok_or_else(|| ApamError::Shape {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        if vb.rank() != 2 || vb.shape()[0] != k {
            return Err(ApamError::Shape {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = vb.shape()[1];
        let mut out = vec![F::zero(); m * n];
        mat_mul(va.data(), vb.data(), m, k, n, &mut out);
        let shape = if va.rank() == 1 { vec![n] } else { vec![m, n] };
        let value = Tensor::new(out, shape)?;
        Ok(self.record(value, Op::MatMul(a, b)))
    }

    /// `A · Bᵀ` for A: m×k, B: n×k → m×n. Used for pairwise similarities.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(ApamError::Shape {
                op: "matmul_nt",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let n = vb.shape()[0];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&va.data()[i * k..(i + 1) * k], &vb.data()[j * k..(j + 1) * k]);
            }
        }
        let value = Tensor::matrix(out, m, n)?;
        Ok(self.record(value, Op::MatMulNT(a, b)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.map_unary(a, |x| if x > F::zero() { x } else { F::zero() });
        self.record(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.map_unary(a, sigmoid);
        self.record(value, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.map_unary(a, |x| x.ln());
        self.record(value, Op::Log(a))
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> NodeId {
        let value = self.map_unary(a, |x| x * c);
        self.record(value, Op::Scale(a, c))
    }

    pub fn pow_scalar(&mut self, a: NodeId, p: F) -> NodeId {
        let value = self.map_unary(a, |x| x.powf(p));
        self.record(value, Op::PowScalar(a, p))
    }

    /// Mean over all elements → scalar.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let k = F::c(v.numel() as f64);
        let s: F = v.data().iter().copied().sum();
        self.record(Tensor::scalar(s / k), Op::Mean(a))
    }

    /// Sum over all elements → scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: F = self.nodes[a].value.data().iter().copied().sum();
        self.record(Tensor::scalar(s), Op::Sum(a))
    }

    /// Column-wise mean of a rank-2 tensor → rank-1 of its column count.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.rank() != 2 {
            return Err(ApamError::Shape {
                op: "mean_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (v.shape()[0], v.shape()[1]);
        let inv = F::c(1.0 / n as f64);
        let mut out = vec![F::zero(); d];
        for i in 0..n {
            for j in 0..d {
                out[j] = out[j] + v.data()[i * d + j];
            }
        }
        for x in &mut out {
            *x = *x * inv;
        }
        Ok(self.record(Tensor::vector(out), Op::MeanRows(a)))
    }

    /// Numerically stable softmax over a rank-1 input.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = rank1(&self.nodes[a].value, "softmax")?;
        let value = Tensor::vector(softmax_vec(v));
        Ok(self.record(value, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = rank1(&self.nodes[a].value, "log_softmax")?;
        let m = v.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + v.iter().map(|x| (*x - m).exp()).sum::<F>().ln();
        let value = Tensor::vector(v.iter().map(|x| *x - lse).collect());
        Ok(self.record(value, Op::LogSoftmax(a)))
    }

    /// Row-wise L2 normalization; rank-1 inputs are treated as one row.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        let d = *v.shape().last().ok_or_else(|| ApamError::Shape {
            op: "l2_normalize",
            lhs: v.shape().to_vec(),
            rhs: vec![],
        })?;
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let norm = dot(row, row).sqrt();
            if norm == F::zero() {
                return Err(ApamError::contract(
                    "l2_normalize",
                    "zero-norm row, cosine undefined",
                ));
            }
            out.extend(row.iter().map(|x| *x / norm));
        }
        let value = Tensor::new(out, v.shape().to_vec())?;
        Ok(self.record(value, Op::L2NormalizeRows(a)))
    }

    /// Inverted dropout: surviving entries scaled by 1/(1−p). The Bernoulli
    /// mask is drawn from `seed` alone and recorded on the tape, so a view
    /// pair (z, z′) is reproducible.
    pub fn dropout(&mut self, a: NodeId, p: f64, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(ApamError::domain(
                "dropout",
                format!("p must be in [0,1), got {p}"),
            ));
        }
        let v = &self.nodes[a].value;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inv = F::c(1.0 / (1.0 - p));
        let keep: Vec<F> = (0..v.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else if p == 0.0 {
                    F::one()
                } else {
                    inv
                }
            })
            .collect();
        let data = v.data().iter().zip(&keep).map(|(x, k)| *x * *k).collect();
        let value = Tensor::new(data, v.shape().to_vec())?;
        Ok(self.record(value, Op::Dropout { input: a, keep }))
    }

    /// Gather rows of a rank-2 table → (indices.len() × d).
    pub fn embedding_lookup(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[table].value;
        if t.rank() != 2 {
            return Err(ApamError::Shape {
                op: "embedding_lookup",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(ApamError::contract(
                "embedding_lookup",
                format!("index {bad} out of range for table with {rows} rows"),
            ));
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(out, indices.len(), d)?;
        Ok(self.record(
            value,
            Op::EmbeddingLookup {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Stack rank-1 vectors of equal length into an n×d matrix.
    pub fn concat_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(ApamError::contract("concat_rows", "no input rows"));
        }
        let d = self.nodes[rows[0]].value.numel();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let v = &self.nodes[r].value;
            if v.rank() != 1 || v.numel() != d {
                return Err(ApamError::Shape {
                    op: "concat_rows",
                    lhs: vec![d],
                    rhs: v.shape().to_vec(),
                });
            }
            out.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(out, rows.len(), d)?;
        Ok(self.record(value, Op::ConcatRows(rows.to_vec())))
    }

    /// Stack scalar nodes into a rank-1 vector.
    pub fn stack(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let v = &self.nodes[s].value;
            if !v.is_scalar() {
                return Err(ApamError::Shape {
                    op: "stack",
                    lhs: vec![],
                    rhs: v.shape().to_vec(),
                });
            }
            out.push(v.item());
        }
        let value = Tensor::vector(out);
        Ok(self.record(value, Op::Stack(scalars.to_vec())))
    }

    /// Extract row `i` of a rank-2 tensor as a rank-1 node.
    pub fn row(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.rank() != 2 || i >= v.shape()[0] {
            return Err(ApamError::contract(
                "row",
                format!("row {i} of shape {:?}", v.shape()),
            ));
        }
        let value = Tensor::vector(v.row(i).to_vec());
        Ok(self.record(value, Op::Row(a, i)))
    }

    /// Extract element `i` of a rank-1 tensor as a scalar node.
    pub fn pick(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let v = &self.nodes[a].value;
        if v.rank() != 1 || i >= v.numel() {
            return Err(ApamError::contract(
                "pick",
                format!("index {i} of shape {:?}", v.shape()),
            ));
        }
        let value = Tensor::scalar(v.data()[i]);
        Ok(self.record(value, Op::Pick(a, i)))
    }

    fn map_unary(&self, a: NodeId, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = &self.nodes[a].value;
        Tensor::new(v.data().iter().map(|x| f(*x)).collect(), v.shape().to_vec()).unwrap()
    }
}

fn lhs_dims<F: Real>(v: &Tensor<F>) -> Option<(usize, usize)> {
    match v.rank() {
        1 => Some((1, v.shape()[0])),
        2 => Some((v.shape()[0], v.shape()[1])),
        _ => None,
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn mat_mul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_vec<F: Real>(v: &[F]) -> Vec<F> {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = v.iter().map(|x| (*x - m).exp()).collect();
    let s: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Reverse sweep from a scalar root. Returns gradients for every parameter
/// leaf that the root depends on; does not mutate the tape.
pub fn backward<F: Real>(tape: &Tape<F>, root: NodeId) -> Result<GradMap<F>> {
    if !tape.nodes[root].value.is_scalar() {
        return Err(ApamError::contract(
            "backward",
            format!("root must be scalar, got shape {:?}", tape.nodes[root].value.shape()),
        ));
    }
    let mut grads: Vec<Option<Tensor<F>>> = vec![None; root + 1];
    grads[root] = Some(Tensor::scalar(F::one()));

    for id in (0..=root).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        let node = &tape.nodes[id];
        if let Op::Leaf = node.op {
            if node.needs_grad {
                grads[id] = Some(g);
            }
            continue;
        }
        if !node.needs_grad {
            continue;
        }
        propagate(tape, id, &g, &mut grads);
    }

    let mut out = GradMap::new();
    for (id, g) in grads.into_iter().enumerate() {
        if let Some(g) = g {
            if tape.is_param(id) {
                out.insert(id, g);
            }
        }
    }
    Ok(out)
}

fn accumulate<F: Real>(grads: &mut [Option<Tensor<F>>], tape: &Tape<F>, id: NodeId, delta: Tensor<F>) {
    if !tape.nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.axpy(F::one(), &delta),
        slot @ None => *slot = Some(delta),
    }
}

fn propagate<F: Real>(tape: &Tape<F>, id: NodeId, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
    let node = &tape.nodes[id];
    let val = |n: NodeId| &tape.nodes[n].value;
    match &node.op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            accumulate(grads, tape, *a, g.clone());
            accumulate(grads, tape, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, tape, *a, g.clone());
            accumulate(grads, tape, *b, g.scaled(-F::one()));
        }
        Op::Mul(a, b) => {
            let da = elementwise(g, val(*b), |x, y| x * y);
            let db = elementwise(g, val(*a), |x, y| x * y);
            accumulate(grads, tape, *a, da);
            accumulate(grads, tape, *b, db);
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = lhs_dims(va).unwrap();
            let n = vb.shape()[1];
            // dA = dC · Bᵀ
            let mut da = vec![F::zero(); m * k];
            for i in 0..m {
                for l in 0..k {
                    da[i * k + l] = dot(&g.data()[i * n..(i + 1) * n], &row_of(vb, l, n));
                }
            }
            // dB = Aᵀ · dC
            let mut db = vec![F::zero(); k * n];
            for l in 0..k {
                for i in 0..m {
                    let av = va.data()[i * k + l];
                    if av == F::zero() {
                        continue;
                    }
                    for j in 0..n {
                        db[l * n + j] = db[l * n + j] + av * g.data()[i * n + j];
                    }
                }
            }
            accumulate(grads, tape, *a, Tensor::new(da, va.shape().to_vec()).unwrap());
            accumulate(grads, tape, *b, Tensor::new(db, vb.shape().to_vec()).unwrap());
        }
        Op::MatMulNT(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[0];
            // C = A·Bᵀ; dA = dC·B, dB = dCᵀ·A
            let mut da = vec![F::zero(); m * k];
            mat_mul(g.data(), vb.data(), m, n, k, &mut da);
            let mut db = vec![F::zero(); n * k];
            for j in 0..n {
                for i in 0..m {
                    let gv = g.data()[i * n + j];
                    if gv == F::zero() {
                        continue;
                    }
                    for l in 0..k {
                        db[j * k + l] = db[j * k + l] + gv * va.data()[i * k + l];
                    }
                }
            }
            accumulate(grads, tape, *a, Tensor::matrix(da, m, k).unwrap());
            accumulate(grads, tape, *b, Tensor::matrix(db, n, k).unwrap());
        }
        Op::Relu(a) => {
            let da = elementwise(g, val(*a), |gy, x| if x > F::zero() { gy } else { F::zero() });
            accumulate(grads, tape, *a, da);
        }
        Op::Sigmoid(a) => {
            let da = elementwise(g, &node.value, |gy, y| gy * y * (F::one() - y));
            accumulate(grads, tape, *a, da);
        }
        Op::Log(a) => {
            let da = elementwise(g, val(*a), |gy, x| gy / x);
            accumulate(grads, tape, *a, da);
        }
        Op::Mean(a) => {
            let v = val(*a);
            let c = g.item() / F::c(v.numel() as f64);
            accumulate(grads, tape, *a, constant_like(v, c));
        }
        Op::Sum(a) => {
            accumulate(grads, tape, *a, constant_like(val(*a), g.item()));
        }
        Op::MeanRows(a) => {
            let v = val(*a);
            let (n, d) = (v.shape()[0], v.shape()[1]);
            let inv = F::c(1.0 / n as f64);
            let mut da = Vec::with_capacity(n * d);
            for _ in 0..n {
                da.extend(g.data().iter().map(|x| *x * inv));
            }
            accumulate(grads, tape, *a, Tensor::matrix(da, n, d).unwrap());
        }
        Op::Scale(a, c) => {
            accumulate(grads, tape, *a, g.scaled(*c));
        }
        Op::PowScalar(a, p) => {
            let da = elementwise(g, val(*a), |gy, x| gy * *p * x.powf(*p - F::one()));
            accumulate(grads, tape, *a, da);
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let s: F = g.data().iter().zip(y).map(|(gy, yi)| *gy * *yi).sum();
            let da: Vec<F> = g
                .data()
                .iter()
                .zip(y)
                .map(|(gy, yi)| *yi * (*gy - s))
                .collect();
            accumulate(grads, tape, *a, Tensor::vector(da));
        }
        Op::LogSoftmax(a) => {
            let y = node.value.data();
            let s: F = g.data().iter().copied().sum();
            let da: Vec<F> = g
                .data()
                .iter()
                .zip(y)
                .map(|(gy, yi)| *gy - yi.exp() * s)
                .collect();
            accumulate(grads, tape, *a, Tensor::vector(da));
        }
        Op::L2NormalizeRows(a) => {
            let x = val(*a);
            let d = *x.shape().last().unwrap();
            let mut da = Vec::with_capacity(x.numel());
            for (xrow, pair) in x
                .data()
                .chunks(d)
                .zip(node.value.data().chunks(d).zip(g.data().chunks(d)))
            {
                let (yrow, grow) = pair;
                let norm = dot(xrow, xrow).sqrt();
                let yg = dot(yrow, grow);
                for j in 0..d {
                    da.push((grow[j] - yrow[j] * yg) / norm);
                }
            }
            accumulate(grads, tape, *a, Tensor::new(da, x.shape().to_vec()).unwrap());
        }
        Op::Dropout { input, keep } => {
            let da: Vec<F> = g.data().iter().zip(keep).map(|(gy, k)| *gy * *k).collect();
            accumulate(
                grads,
                tape,
                *input,
                Tensor::new(da, g.shape().to_vec()).unwrap(),
            );
        }
        Op::EmbeddingLookup { table, indices } => {
            let t = val(*table);
            let d = t.shape()[1];
            let mut dt = Tensor::zeros(t.shape());
            for (r, &i) in indices.iter().enumerate() {
                let src = &g.data()[r * d..(r + 1) * d];
                let dst = &mut dt.data_mut()[i * d..(i + 1) * d];
                for j in 0..d {
                    dst[j] = dst[j] + src[j];
                }
            }
            accumulate(grads, tape, *table, dt);
        }
        Op::ConcatRows(ids) => {
            let d = g.shape()[1];
            for (r, &id) in ids.iter().enumerate() {
                let slice = g.data()[r * d..(r + 1) * d].to_vec();
                accumulate(grads, tape, id, Tensor::vector(slice));
            }
        }
        Op::Stack(ids) => {
            for (j, &id) in ids.iter().enumerate() {
                accumulate(grads, tape, id, Tensor::scalar(g.data()[j]));
            }
        }
        Op::Row(a, i) => {
            let v = val(*a);
            let mut da = Tensor::zeros(v.shape());
            let d = v.shape()[1];
            da.data_mut()[i * d..(i + 1) * d].copy_from_slice(g.data());
            accumulate(grads, tape, *a, da);
        }
        Op::Pick(a, i) => {
            let v = val(*a);
            let mut da = Tensor::zeros(v.shape());
            da.data_mut()[*i] = g.item();
            accumulate(grads, tape, *a, da);
        }
    }
}

fn elementwise<F: Real>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    Tensor::new(
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        a.shape().to_vec(),
    )
    .unwrap()
}

fn constant_like<F: Real>(v: &Tensor<F>, c: F) -> Tensor<F> {
    Tensor::new(vec![c; v.numel()], v.shape().to_vec()).unwrap()
}

fn row_of<F: Real>(v: &Tensor<F>, i: usize, n: usize) -> Vec<F> {
    v.data()[i * n..(i + 1) * n].to_vec()
}

fn rank1<'a, F: Real>(v: &'a Tensor<F>, op: &'static str) -> Result<&'a [F]> {
    if v.rank() != 1 {
        return Err(ApamError::Shape {
            op,
            lhs: v.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(v.data())
}

/// One independent backward pass per stacked per-sample loss, in index
/// order. `losses` must be a rank-1 node produced by [`Tape::stack`].
pub fn per_sample_grads<F: Real>(tape: &Tape<F>, losses: NodeId) -> Result<Vec<GradMap<F>>> {
    let node = &tape.nodes[losses];
    if node.value.rank() != 1 {
        return Err(ApamError::contract(
            "per_sample_grads",
            format!("losses must be rank-1, got shape {:?}", node.value.shape()),
        ));
    }
    let roots = match &node.op {
        Op::Stack(ids) => ids.clone(),
        _ => {
            return Err(ApamError::contract(
                "per_sample_grads",
                "losses node must stack per-sample scalar losses",
            ))
        }
    };
    roots
        .par_iter()
        .map(|&root| backward(tape, root))
        .collect()
}
