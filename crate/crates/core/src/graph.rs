//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough state to run its pullback. Parameters live outside the
//! tape in a [`ParamStore`]; [`Graph::backward`] accumulates their gradients
//! into any [`GradSink`], so several tapes can feed one gradient buffer.
//! A tape is single use: a second `backward` fails with
//! [`Error::StaleGraph`].

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::{dot, Mask, Matrix};
use crate::ops;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named learnable matrix with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { name: name.into(), value, grad }
    }
}

/// Destination for parameter gradients produced by [`Graph::backward`].
pub trait GradSink {
    fn grad_mut(&mut self, id: ParamId) -> &mut Matrix;
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Zeroed buffer shaped like every parameter.
    pub fn gradients_like(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect())
    }

    /// Adds `grads` into the parameters' own accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            p.grad.add_assign(g)?;
        }
        Ok(())
    }
}

impl GradSink for ParamStore {
    fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].grad
    }
}

/// Detached gradient buffer indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Matrix>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

impl GradSink for Gradients {
    fn grad_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.0[id.0]
    }
}

/// Operation tag, used for diagnostics and pullback fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Constant,
    Variable,
    Param,
    Embed,
    MatMul,
    MatMulNt,
    Add,
    Mul,
    AddRow,
    Scale,
    Gather,
    SliceRows,
    ConcatRows,
    SliceCols,
    ConcatCols,
    Softmax,
    LayerNorm,
    Relu,
    Dropout,
    RowDot,
    MulColumn,
    Sum,
    Bce,
}

impl OpKind {
    /// Every kind that has a pullback.
    pub const DIFFERENTIABLE: [OpKind; 21] = [
        OpKind::Param,
        OpKind::Embed,
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Add,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Gather,
        OpKind::SliceRows,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Relu,
        OpKind::Dropout,
        OpKind::RowDot,
        OpKind::MulColumn,
        OpKind::Sum,
        OpKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Variable => "variable",
            OpKind::Param => "param",
            OpKind::Embed => "embed",
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Gather => "gather",
            OpKind::SliceRows => "slice_rows",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Relu => "relu",
            OpKind::Dropout => "dropout",
            OpKind::RowDot => "row_dot",
            OpKind::MulColumn => "mul_column",
            OpKind::Sum => "sum",
            OpKind::Bce => "bce",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        match name {
            "constant" => return Some(OpKind::Constant),
            "variable" => return Some(OpKind::Variable),
            _ => {}
        }
        Self::DIFFERENTIABLE.iter().copied().find(|k| k.name() == name)
    }
}

impl core::fmt::Display for OpKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Attribution bucket for the multiply-add counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlopBucket {
    Other = 0,
    /// Query, key and value projections of the attention sublayer.
    Projection = 1,
    /// Query-key dot products.
    Scores = 2,
    /// Attention-weighted sums of values.
    WeightedSum = 3,
    /// Query-level aggregator projections.
    AggProjection = 4,
    /// Query-level aggregator scores.
    AggScores = 5,
    /// Query-level aggregator weighted sums.
    AggWeightedSum = 6,
}

/// Multiply-adds performed by contraction ops (matrix products, row dots
/// and column-weighted accumulations), split by [`FlopBucket`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: [u64; 7],
}

impl FlopCounter {
    pub fn get(&self, bucket: FlopBucket) -> u64 {
        self.counts[bucket as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn add(&mut self, bucket: FlopBucket, n: usize) {
        self.counts[bucket as usize] += n as u64;
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    Embed { table: ParamId, ids: Vec<usize>, skip_padding: bool },
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather(NodeId, Vec<usize>),
    SliceRows(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    Softmax(NodeId),
    LayerNorm { input: NodeId, gain: NodeId, bias: NodeId, normalized: Matrix, inv_std: Vec<f64> },
    Relu(NodeId),
    Dropout(NodeId, Vec<f64>),
    RowDot(NodeId, NodeId),
    MulColumn { input: NodeId, weights: NodeId, col: usize },
    Sum(NodeId),
    Bce { pos: NodeId, neg: NodeId, weights: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Variable => OpKind::Variable,
            Op::Param(_) => OpKind::Param,
            Op::Embed { .. } => OpKind::Embed,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Gather(..) => OpKind::Gather,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Relu(..) => OpKind::Relu,
            Op::Dropout(..) => OpKind::Dropout,
            Op::RowDot(..) => OpKind::RowDot,
            Op::MulColumn { .. } => OpKind::MulColumn,
            Op::Sum(..) => OpKind::Sum,
            Op::Bce { .. } => OpKind::Bce,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    values: Vec<Matrix>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    leaf_grads: Vec<Option<Matrix>>,
    consumed: bool,
    fault: Option<OpKind>,
    flops: FlopCounter,
    bucket: FlopBucket,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Factor applied to a faulty pullback by [`Graph::with_fault`].
pub const FAULT_FACTOR: f64 = 1.5;

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            leaf_grads: Vec::new(),
            consumed: false,
            fault: None,
            flops: FlopCounter::default(),
            bucket: FlopBucket::Other,
        }
    }

    /// Corrupts every pullback of `kind` by [`FAULT_FACTOR`]. Test fixture
    /// for the gradient checker.
    pub fn with_fault(mut self, kind: Option<OpKind>) -> Self {
        self.fault = kind;
        self
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.ops[id.0].kind()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    /// Routes subsequent multiply-adds to `bucket`; returns the previous one.
    pub fn set_flop_bucket(&mut self, bucket: FlopBucket) -> FlopBucket {
        core::mem::replace(&mut self.bucket, bucket)
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let needs = match &op {
            Op::Constant => false,
            Op::Variable | Op::Param(_) | Op::Embed { .. } => true,
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::RowDot(a, b)
            | Op::Bce { pos: a, neg: b, .. }
            | Op::MulColumn { input: a, weights: b, .. } => self.needs_grad[a.0] || self.needs_grad[b.0],
            Op::Scale(a, _)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Softmax(a)
            | Op::Relu(a)
            | Op::Dropout(a, _)
            | Op::Sum(a) => self.needs_grad[a.0],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(|p| self.needs_grad[p.0]),
            Op::LayerNorm { input, gain, bias, .. } => {
                self.needs_grad[input.0] || self.needs_grad[gain.0] || self.needs_grad[bias.0]
            }
        };
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs);
        NodeId(self.values.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.values[id.0].shape()
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    /// Differentiable free input; its gradient is readable through
    /// [`Graph::grad`] after `backward`.
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Variable)
    }

    /// Gradient reaching a [`Graph::variable`] leaf in the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&Matrix> {
        self.leaf_grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Leaf carrying a copy of a parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Row lookup into an embedding parameter. With `skip_padding`, id 0
    /// receives no gradient.
    pub fn embed(&mut self, store: &ParamStore, table: ParamId, ids: &[u32], skip_padding: bool) -> Result<NodeId> {
        let t = store.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        let mut idx = Vec::with_capacity(ids.len());
        for (r, &id) in ids.iter().enumerate() {
            let i = id as usize;
            if i >= t.rows() {
                return Err(Error::UnknownItem { id, vocabulary: t.rows() });
            }
            out.row_mut(r).copy_from_slice(t.row(i));
            idx.push(i);
        }
        Ok(self.push(out, Op::Embed { table, ids: idx, skip_padding }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].matmul(&self.values[b.0])?;
        let (n, k) = self.shape(a);
        self.flops.add(self.bucket, n * k * value.cols());
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a × bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.values[a.0].matmul_nt(&self.values[b.0])?;
        let (n, k) = self.shape(a);
        self.flops.add(self.bucket, n * k * value.cols());
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut value = self.values[a.0].clone();
        value.add_assign(&self.values[b.0])?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let mut value = self.values[a.0].clone();
        for (v, w) in value.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *v *= w;
        }
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape("add_row", (n, c), self.shape(row)));
        }
        let mut value = self.values[a.0].clone();
        let r = self.values[row.0].data().to_vec();
        for i in 0..n {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut value = self.values[a.0].clone();
        value.scale_assign(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Row `i` of the output is row `rows[i]` of `x`.
    pub fn gather(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let src = &self.values[x.0];
        let mut value = Matrix::zeros(rows.len(), src.cols());
        for (r, &i) in rows.iter().enumerate() {
            if i >= src.rows() {
                return Err(Error::shape("gather", src.shape(), (i + 1, src.cols())));
            }
            value.row_mut(r).copy_from_slice(src.row(i));
        }
        Ok(self.push(value, Op::Gather(x, rows.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = &self.values[x.0];
        if start + len > src.rows() {
            return Err(Error::shape("slice_rows", src.shape(), (start + len, src.cols())));
        }
        let c = src.cols();
        let value = Matrix::new(len, c, src.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let c = parts.first().map(|p| self.shape(*p).1).ok_or(Error::EmptyInput("concat_rows"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &self.values[p.0];
            if v.cols() != c {
                return Err(Error::shape("concat_rows", (rows, c), v.shape()));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let value = Matrix::new(rows, c, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = &self.values[x.0];
        if start + len > src.cols() {
            return Err(Error::shape("slice_cols", src.shape(), (src.rows(), start + len)));
        }
        let value = Matrix::from_fn(src.rows(), len, |i, j| src.get(i, start + j));
        Ok(self.push(value, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let n = parts.first().map(|p| self.shape(*p).0).ok_or(Error::EmptyInput("concat_cols"))?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != n {
                return Err(Error::shape("concat_cols", (n, total), s));
            }
            total += s.1;
        }
        let mut value = Matrix::zeros(n, total);
        let mut offset = 0;
        for p in parts {
            let v = &self.values[p.0];
            for i in 0..n {
                value.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Row softmax over unmasked entries; see [`ops::masked_softmax_rows`].
    pub fn softmax(&mut self, x: NodeId, mask: Option<&Mask>) -> Result<NodeId> {
        let value = ops::masked_softmax_rows(&self.values[x.0], mask)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let out = ops::layer_norm(&self.values[x.0], &self.values[gain.0], &self.values[bias.0], eps)?;
        Ok(self
            .push(out.output, Op::LayerNorm { input: x, gain, bias, normalized: out.normalized, inv_std: out.inv_std }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut value = self.values[x.0].clone();
        for v in value.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(value, Op::Relu(x))
    }

    /// Inverted dropout. Returns `x` itself (no node) when inactive.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut RngStream, training: bool) -> Result<NodeId> {
        ops::check_rate(rate)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let mask = ops::dropout_mask(self.values[x.0].len(), rate, rng)?;
        let mut value = self.values[x.0].clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// Row-wise inner products: `n × c`, `n × c` → `n × 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("row_dot", self.shape(a), self.shape(b)));
        }
        let (n, c) = self.shape(a);
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let value = Matrix::from_fn(n, 1, |i, _| dot(va.row(i), vb.row(i)));
        self.flops.add(self.bucket, n * c);
        Ok(self.push(value, Op::RowDot(a, b)))
    }

    /// Scales row `i` of `x` by `weights[i][col]`.
    pub fn mul_column(&mut self, x: NodeId, weights: NodeId, col: usize) -> Result<NodeId> {
        let (n, c) = self.shape(x);
        let ws = self.shape(weights);
        if ws.0 != n || col >= ws.1 {
            return Err(Error::shape("mul_column", (n, c), ws));
        }
        let (vx, vw) = (&self.values[x.0], &self.values[weights.0]);
        let value = Matrix::from_fn(n, c, |i, j| vw.get(i, col) * vx.get(i, j));
        self.flops.add(self.bucket, n * c);
        Ok(self.push(value, Op::MulColumn { input: x, weights, col }))
    }

    /// Sum of all entries as a `1 × 1` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.values[x.0].data().iter().sum::<f64>();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x))
    }

    /// `Σᵢ wᵢ·(−log σ(posᵢ) − log(1 − σ(negᵢ)))` over `n × 1` logit columns.
    pub fn bce(&mut self, pos: NodeId, neg: NodeId, weights: &[f64]) -> Result<NodeId> {
        let n = self.shape(pos).0;
        if self.shape(pos) != (n, 1) || self.shape(neg) != (n, 1) || weights.len() != n {
            return Err(Error::shape("bce", self.shape(pos), self.shape(neg)));
        }
        let loss = bce_sum(self.values[pos.0].data(), self.values[neg.0].data(), weights);
        Ok(self.push(Matrix::filled(1, 1, loss), Op::Bce { pos, neg, weights: weights.to_vec() }))
    }

    /// Runs every pullback from `loss` (a `1 × 1` node) and adds parameter
    /// gradients into `sink`.
    pub fn backward(&mut self, loss: NodeId, sink: &mut impl GradSink) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        self.backward_from(loss, Matrix::filled(1, 1, 1.0), sink)
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `output`,
    /// i.e. the gradient of `Σ seed ⊙ output`.
    pub fn backward_from(&mut self, output: NodeId, seed: Matrix, sink: &mut impl GradSink) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward seed", self.shape(output), seed.shape()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        self.leaf_grads = vec![None; self.values.len()];
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            let factor = if self.fault == Some(self.ops[i].kind()) { FAULT_FACTOR } else { 1.0 };
            let mut acc = Accumulator { grads: &mut grads, needs: &self.needs_grad, factor };
            let vals = &self.values;
            match &self.ops[i] {
                Op::Constant => {}
                Op::Variable => self.leaf_grads[i] = Some(g),
                Op::Param(id) => {
                    let mut g = g;
                    g.scale_assign(factor);
                    sink.grad_mut(*id).add_assign(&g)?;
                }
                Op::Embed { table, ids, skip_padding } => {
                    let dst = sink.grad_mut(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        if *skip_padding && id == 0 {
                            continue;
                        }
                        for (d, s) in dst.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s * factor;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, g.matmul_nt(&vals[b.0])?)?;
                    }
                    if acc.wants(*b) {
                        acc.add(*b, vals[a.0].matmul_tn(&g)?)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if acc.wants(*a) {
                        acc.add(*a, g.matmul(&vals[b.0])?)?;
                    }
                    if acc.wants(*b) {
                        acc.add(*b, g.matmul_tn(&vals[a.0])?)?;
                    }
                }
                Op::Add(a, b) => {
                    if acc.wants(*b) {
                        acc.add(*b, g.clone())?;
                    }
                    acc.add(*a, g)?;
                }
                Op::Mul(a, b) => {
                    for (x, y) in [(*a, *b), (*b, *a)] {
                        if acc.wants(x) {
                            let mut gx = g.clone();
                            for (v, w) in gx.data_mut().iter_mut().zip(vals[y.0].data()) {
                                *v *= w;
                            }
                            acc.add(x, gx)?;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if acc.wants(*row) {
                        let mut gr = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (s, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                                *s += v;
                            }
                        }
                        acc.add(*row, gr)?;
                    }
                    acc.add(*a, g)?;
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    acc.add(*a, g)?;
                }
                Op::Gather(x, rows) => {
                    let src = vals[x.0].shape();
                    let mut gx = Matrix::zeros(src.0, src.1);
                    for (r, &i) in rows.iter().enumerate() {
                        for (d, s) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    acc.add(*x, gx)?;
                }
                Op::SliceRows(x, start) => {
                    let src = vals[x.0].shape();
                    let mut gx = Matrix::zeros(src.0, src.1);
                    let c = src.1;
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc.add(*x, gx)?;
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let (r, _) = vals[p.0].shape();
                        if acc.wants(*p) {
                            let gp = Matrix::new(r, c, g.data()[offset * c..(offset + r) * c].to_vec())?;
                            acc.add(*p, gp)?;
                        }
                        offset += r;
                    }
                }
                Op::SliceCols(x, start) => {
                    let src = vals[x.0].shape();
                    let mut gx = Matrix::zeros(src.0, src.1);
                    for i in 0..g.rows() {
                        gx.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    acc.add(*x, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (_, c) = vals[p.0].shape();
                        if acc.wants(*p) {
                            let gp = Matrix::from_fn(g.rows(), c, |r, j| g.get(r, offset + j));
                            acc.add(*p, gp)?;
                        }
                        offset += c;
                    }
                }
                Op::Softmax(x) => {
                    let y = &vals[i];
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for (d, (yv, gv)) in gx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *d = yv * (gv - inner);
                        }
                    }
                    acc.add(*x, gx)?;
                }
                Op::LayerNorm { input, gain, bias, normalized, inv_std } => {
                    let gamma = vals[gain.0].data();
                    let (n, d) = normalized.shape();
                    if acc.wants(*bias) || acc.wants(*gain) {
                        let mut gb = Matrix::zeros(1, d);
                        let mut gg = Matrix::zeros(1, d);
                        for r in 0..n {
                            for j in 0..d {
                                gb.data_mut()[j] += g.get(r, j);
                                gg.data_mut()[j] += g.get(r, j) * normalized.get(r, j);
                            }
                        }
                        if acc.wants(*gain) {
                            acc.add(*gain, gg)?;
                        }
                        if acc.wants(*bias) {
                            acc.add(*bias, gb)?;
                        }
                    }
                    if acc.wants(*input) {
                        let mut gx = Matrix::zeros(n, d);
                        let df = d as f64;
                        for r in 0..n {
                            let xh = normalized.row(r);
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                let gh = g.get(r, j) * gamma[j];
                                s1 += gh;
                                s2 += gh * xh[j];
                            }
                            let k = inv_std[r] / df;
                            for j in 0..d {
                                let gh = g.get(r, j) * gamma[j];
                                gx.set(r, j, k * (df * gh - s1 - xh[j] * s2));
                            }
                        }
                        acc.add(*input, gx)?;
                    }
                }
                Op::Relu(x) => {
                    let mut g = g;
                    for (v, xv) in g.data_mut().iter_mut().zip(vals[x.0].data()) {
                        if *xv <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    acc.add(*x, g)?;
                }
                Op::Dropout(x, mask) => {
                    let mut g = g;
                    for (v, m) in g.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                    acc.add(*x, g)?;
                }
                Op::RowDot(a, b) => {
                    for (x, y) in [(*a, *b), (*b, *a)] {
                        if acc.wants(x) {
                            let vy = &vals[y.0];
                            let gx = Matrix::from_fn(vy.rows(), vy.cols(), |r, j| g.get(r, 0) * vy.get(r, j));
                            acc.add(x, gx)?;
                        }
                    }
                }
                Op::MulColumn { input, weights, col } => {
                    let (vx, vw) = (&vals[input.0], &vals[weights.0]);
                    if acc.wants(*weights) {
                        let mut gw = Matrix::zeros(vw.rows(), vw.cols());
                        for r in 0..vx.rows() {
                            gw.set(r, *col, dot(g.row(r), vx.row(r)));
                        }
                        acc.add(*weights, gw)?;
                    }
                    if acc.wants(*input) {
                        let gx = Matrix::from_fn(vx.rows(), vx.cols(), |r, j| vw.get(r, *col) * g.get(r, j));
                        acc.add(*input, gx)?;
                    }
                }
                Op::Sum(x) => {
                    let (r, c) = vals[x.0].shape();
                    acc.add(*x, Matrix::filled(r, c, g.get(0, 0)))?;
                }
                Op::Bce { pos, neg, weights } => {
                    let s = g.get(0, 0);
                    if acc.wants(*pos) {
                        let p = vals[pos.0].data();
                        let gp = Matrix::from_fn(p.len(), 1, |r, _| s * weights[r] * (ops::sigmoid(p[r]) - 1.0));
                        acc.add(*pos, gp)?;
                    }
                    if acc.wants(*neg) {
                        let q = vals[neg.0].data();
                        let gn = Matrix::from_fn(q.len(), 1, |r, _| s * weights[r] * ops::sigmoid(q[r]));
                        acc.add(*neg, gn)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Weighted sum of per-position binary cross-entropy terms.
pub(crate) fn bce_sum(pos: &[f64], neg: &[f64], weights: &[f64]) -> f64 {
    let mut loss = 0.0;
    for ((p, n), w) in pos.iter().zip(neg).zip(weights) {
        if *w != 0.0 {
            loss += w * (-ops::log_sigmoid(*p) - ops::log_sigmoid(-*n));
        }
    }
    loss
}

struct Accumulator<'a> {
    grads: &'a mut Vec<Option<Matrix>>,
    needs: &'a [bool],
    factor: f64,
}

impl Accumulator<'_> {
    fn wants(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    fn add(&mut self, id: NodeId, mut g: Matrix) -> Result<()> {
        if !self.needs[id.0] {
            return Ok(());
        }
        if self.factor != 1.0 {
            g.scale_assign(self.factor);
        }
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}
