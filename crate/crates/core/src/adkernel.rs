//! Reverse-mode differentiation over small dense matrices.
//!
//! A [`Graph`] is built eagerly: every operation computes its value when it
//! is recorded. [`Graph::grad`] walks the recorded operations backwards and
//! expresses each adjoint as *new graph operations*, so a gradient is itself
//! an ordinary differentiable expression. Taking the gradient of an
//! expression that already contains a gradient is supported once (nesting
//! depth 2); a third level is rejected with [`KernelError::NestingTooDeep`].
//!
//! All values are matrices. Rank-0 and rank-1 bindings are lifted to `1 x 1`
//! and `1 x n`; gradients are reshaped back to the binding's shape.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::array::Array;

/// Highest derivative order an expression may reach.
pub const MAX_ORDER: u8 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("unbound name `{0}`")]
    Unbound(String),
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("gradient nesting deeper than {MAX_ORDER} requested")]
    NestingTooDeep,
    #[error("cannot differentiate with respect to a {0} node")]
    NonDifferentiable(&'static str),
    #[error("expression is not scalar-valued (shape {0:?})")]
    NotScalar(Vec<usize>),
    #[error("arrays of rank {0} are not supported")]
    UnsupportedRank(usize),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
enum MaskKind {
    Positive,
    InRange(f64, f64),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    /// Indicator values; derivative zero everywhere.
    Mask(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    LogSumExpCols(Var),
    SliceCols(Var, usize),
    PadCols(Var, usize),
    SliceRows(Var, usize),
    PadRows(Var, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Clamp(..) => "clamp",
            Op::Mask(..) => "mask",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::BroadcastScalar(..) => "broadcast_scalar",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::LogSumExpCols(..) => "logsumexp",
            Op::SliceCols(..) => "slice_cols",
            Op::PadCols(..) => "pad_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::PadRows(..) => "pad_rows",
        }
    }

    fn inputs(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf | Const => [None, None],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => [Some(a), Some(b)],
            Transpose(a) | Scale(a, _) | Offset(a) | Relu(a) | Clamp(a, ..) | Mask(a)
            | Exp(a) | Log(a) | Sum(a) | SumRows(a) | SumCols(a) | BroadcastScalar(a)
            | BroadcastRows(a) | BroadcastCols(a) | LogSumExpCols(a) | SliceCols(a, _)
            | PadCols(a, _) | SliceRows(a, _) | PadRows(a, _) => [Some(a), None],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    order: u8,
}

/// Named input arrays for an expression.
pub type Bindings = BTreeMap<String, Array>;

/// Eagerly evaluated expression graph.
pub struct Graph<'b> {
    nodes: Vec<Node>,
    bindings: Option<&'b Bindings>,
    named: BTreeMap<String, Var>,
    floor: u8,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims(a: &Array) -> Result<(usize, usize)> {
    a.dims2().ok_or(KernelError::UnsupportedRank(a.rank()))
}

fn mismatch(op: &'static str, a: (usize, usize), b: (usize, usize)) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        left: vec![a.0, a.1],
        right: vec![b.0, b.1],
    }
}

impl<'b> Graph<'b> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: None,
            named: BTreeMap::new(),
            floor: 0,
        }
    }

    pub fn with_bindings(bindings: &'b Bindings) -> Self {
        Self {
            bindings: Some(bindings),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(KernelError::NonFinite(op.name()));
        }
        let order = op
            .inputs()
            .iter()
            .flatten()
            .map(|v| self.nodes[v.0].order)
            .fold(self.floor, u8::max);
        let (r, c) = dims(&value)?;
        let value = if value.rank() == 2 {
            value
        } else {
            value.reshape(vec![r, c])?
        };
        self.nodes.push(Node { value, op, order });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Const)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant(Array::scalar(v))
    }

    /// Leaf for a named binding, created on first use.
    pub fn input(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.named.get(name) {
            return Ok(v);
        }
        let value = self
            .bindings
            .and_then(|b| b.get(name))
            .ok_or_else(|| KernelError::Unbound(name.to_string()))?
            .clone();
        let v = self.leaf(value)?;
        self.named.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    /// Derivative order of a node: 0 for ordinary values, 1 for gradients.
    pub fn order(&self, v: Var) -> u8 {
        self.nodes[v.0].order
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let a = self.value(v);
        a.item()
            .ok_or_else(|| KernelError::NotScalar(a.shape().to_vec()))
    }

    fn val(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (da, db) = (self.shape(a), self.shape(b));
        if da != db {
            return Err(mismatch(op.name(), da, db));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Array::matrix(da.0, da.1, data), op)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.val(a).map(f);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a).matmul(self.val(b))?;
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    /// Elementwise `max(x, 0)`; derivative at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    fn mask(&mut self, a: Var, kind: MaskKind) -> Result<Var> {
        let f = move |x: f64| {
            let on = match kind {
                MaskKind::Positive => x > 0.0,
                MaskKind::InRange(lo, hi) => x > lo && x < hi,
            };
            if on {
                1.0
            } else {
                0.0
            }
        };
        self.unary(a, Op::Mask(a), f)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Sum of all entries, as a `1 x 1` value.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).sum();
        self.push(Array::matrix(1, 1, vec![s]), Op::Sum(a))
    }

    /// Column sums: `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.val(a).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        self.push(Array::matrix(1, c, out), Op::SumRows(a))
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.val(a).data();
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(Array::matrix(r, 1, out), Op::SumCols(a))
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.scalar(a)?;
        self.push(
            Array::filled(&[rows, cols], s),
            Op::BroadcastScalar(a),
        )
    }

    /// Repeats a `1 x m` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(mismatch("broadcast_rows", (r, c), (1, c)));
        }
        let row = self.val(a).data();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(row);
        }
        self.push(Array::matrix(rows, c, out), Op::BroadcastRows(a))
    }

    /// Repeats an `n x 1` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(mismatch("broadcast_cols", (r, c), (r, 1)));
        }
        let col = self.val(a).data();
        let mut out = Vec::with_capacity(r * cols);
        for &x in col {
            out.extend(std::iter::repeat_n(x, cols));
        }
        self.push(Array::matrix(r, cols, out), Op::BroadcastCols(a))
    }

    /// Row-wise log-sum-exp: `n x m -> n x 1`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let src = self.val(a).data();
        let out = (0..r)
            .map(|i| {
                let row = &src[i * c..(i + 1) * c];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Array::matrix(r, 1, out), Op::LogSumExpCols(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(mismatch("slice_cols", (r, c), (r, start + len)));
        }
        let src = self.val(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Array::matrix(r, len, out), Op::SliceCols(a, start))
    }

    /// Embeds `a` into zero columns `start..start+cols(a)` of a `total`-wide matrix.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + c > total {
            return Err(mismatch("pad_cols", (r, c), (r, total)));
        }
        let src = self.val(a).data();
        let mut out = vec![0.0; r * total];
        for i in 0..r {
            out[i * total + start..i * total + start + c].copy_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(Array::matrix(r, total, out), Op::PadCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(mismatch("slice_rows", (r, c), (start + len, c)));
        }
        let out = self.val(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Array::matrix(len, c, out), Op::SliceRows(a, start))
    }

    pub fn pad_rows(&mut self, a: Var, start: usize, total: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + r > total {
            return Err(mismatch("pad_rows", (r, c), (total, c)));
        }
        let mut out = vec![0.0; total * c];
        out[start * c..(start + r) * c].copy_from_slice(self.val(a).data());
        self.push(Array::matrix(total, c, out), Op::PadRows(a, start))
    }

    // Composites.

    /// `x W + b` with `b` a `1 x out` row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let rows = self.shape(xw).0;
        let bb = self.broadcast_rows(b, rows)?;
        self.add(xw, bb)
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a)?;
        self.sum(sq)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    /// Log-sum-exp over every entry.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).0 == 1 {
            return self.logsumexp_cols(a);
        }
        let per_row = self.logsumexp_cols(a)?;
        let row = self.transpose(per_row)?;
        self.logsumexp_cols(row)
    }

    fn zeros_like(&mut self, v: Var) -> Result<Var> {
        let (r, c) = self.shape(v);
        self.constant(Array::zeros(&[r, c]))
    }

    fn accumulate(&mut self, adj: &mut [Option<Var>], target: Var, g: Var) -> Result<()> {
        adj[target.0] = Some(match adj[target.0] {
            Some(prev) => self.add(prev, g)?,
            None => g,
        });
        Ok(())
    }

    /// Gradient of the scalar `out` with respect to each node in `wrt`.
    ///
    /// The result nodes are part of this graph and may themselves be
    /// differentiated once more. `wrt` may name intermediate nodes; the
    /// result is then the partial derivative holding that node's own inputs
    /// fixed.
    pub fn grad(&mut self, out: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let (r, c) = self.shape(out);
        if (r, c) != (1, 1) {
            return Err(KernelError::NotScalar(vec![r, c]));
        }
        let order = self.nodes[out.0].order;
        if order >= MAX_ORDER {
            return Err(KernelError::NestingTooDeep);
        }
        for w in wrt {
            if let Op::Mask(..) = self.nodes[w.0].op {
                return Err(KernelError::NonDifferentiable("mask"));
            }
        }
        let Some(lo) = wrt.iter().map(|v| v.0).min() else {
            return Ok(Vec::new());
        };

        // Nodes in lo..=out that depend on some wrt node.
        let span = out.0 + 1;
        let mut needs = vec![false; span];
        for w in wrt {
            if w.0 < span {
                needs[w.0] = true;
            }
        }
        for i in lo..span {
            if needs[i] {
                continue;
            }
            needs[i] = match self.nodes[i].op {
                Op::Mask(..) => false,
                op => op.inputs().iter().flatten().any(|v| v.0 >= lo && needs[v.0]),
            };
        }

        let saved_floor = self.floor;
        self.floor = order + 1;
        let result = self.backward(out, lo, &needs);
        self.floor = saved_floor;
        let adj = result?;

        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let saved = self.floor;
                    self.floor = order + 1;
                    let z = self.zeros_like(w);
                    self.floor = saved;
                    z
                }
            })
            .collect()
    }

    fn backward(&mut self, out: Var, lo: usize, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let mut adj: Vec<Option<Var>> = vec![None; out.0 + 1];
        adj[out.0] = Some(self.constant(Array::matrix(1, 1, vec![1.0]))?);
        let wants = |v: Var| v.0 >= lo && needs[v.0];

        for i in (lo..=out.0).rev() {
            let Some(g) = adj[i] else { continue };
            if !needs[i] {
                continue;
            }
            let this = Var(i);
            match self.nodes[i].op {
                Op::Leaf | Op::Const | Op::Mask(..) => {}
                Op::MatMul(a, b) => {
                    if wants(a) {
                        let bt = self.transpose(b)?;
                        let ga = self.matmul(g, bt)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(b) {
                        let at = self.transpose(a)?;
                        let gb = self.matmul(at, g)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Transpose(a) => {
                    let ga = self.transpose(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Add(a, b) => {
                    if wants(a) {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if wants(b) {
                        self.accumulate(&mut adj, b, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if wants(a) {
                        self.accumulate(&mut adj, a, g)?;
                    }
                    if wants(b) {
                        let gb = self.neg(g)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Mul(a, b) => {
                    if wants(a) {
                        let ga = self.mul(g, b)?;
                        self.accumulate(&mut adj, a, ga)?;
                    }
                    if wants(b) {
                        let gb = self.mul(g, a)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Div(a, b) => {
                    let gq = self.div(g, b)?;
                    if wants(a) {
                        self.accumulate(&mut adj, a, gq)?;
                    }
                    if wants(b) {
                        // d(a/b)/db = -(a/b)/b
                        let t = self.mul(gq, this)?;
                        let gb = self.neg(t)?;
                        self.accumulate(&mut adj, b, gb)?;
                    }
                }
                Op::Scale(a, c) => {
                    let ga = self.scale(g, c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Offset(a) => self.accumulate(&mut adj, a, g)?,
                Op::Relu(a) => {
                    let m = self.mask(a, MaskKind::Positive)?;
                    let ga = self.mul(g, m)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Clamp(a, lo_c, hi_c) => {
                    let m = self.mask(a, MaskKind::InRange(lo_c, hi_c))?;
                    let ga = self.mul(g, m)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = self.mul(g, this)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Log(a) => {
                    let ga = self.div(g, a)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    let ga = self.broadcast_scalar(g, r, c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::BroadcastScalar(a) => {
                    let ga = self.sum(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumRows(a) => {
                    let r = self.shape(a).0;
                    let ga = self.broadcast_rows(g, r)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::BroadcastRows(a) => {
                    let ga = self.sum_rows(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SumCols(a) => {
                    let c = self.shape(a).1;
                    let ga = self.broadcast_cols(g, c)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::BroadcastCols(a) => {
                    let ga = self.sum_cols(g)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::LogSumExpCols(a) => {
                    // softmax(a) expressed through graph ops so it stays differentiable
                    let c = self.shape(a).1;
                    let lse = self.broadcast_cols(this, c)?;
                    let shifted = self.sub(a, lse)?;
                    let soft = self.exp(shifted)?;
                    let gb = self.broadcast_cols(g, c)?;
                    let ga = self.mul(gb, soft)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SliceCols(a, start) => {
                    let total = self.shape(a).1;
                    let ga = self.pad_cols(g, start, total)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::PadCols(a, start) => {
                    let len = self.shape(a).1;
                    let ga = self.slice_cols(g, start, len)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::SliceRows(a, start) => {
                    let total = self.shape(a).0;
                    let ga = self.pad_rows(g, start, total)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
                Op::PadRows(a, start) => {
                    let len = self.shape(a).0;
                    let ga = self.slice_rows(g, start, len)?;
                    self.accumulate(&mut adj, a, ga)?;
                }
            }
        }
        Ok(adj)
    }
}

/// A scalar-valued expression over named bindings.
///
/// Implemented for closures `Fn(&mut Graph) -> Result<Var>`; inside the
/// closure, [`Graph::input`] fetches a binding and [`Graph::grad`] may be
/// used to embed a first-order gradient.
pub trait ScalarExpression {
    fn build(&self, g: &mut Graph<'_>) -> Result<Var>;
}

impl<F> ScalarExpression for F
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    fn build(&self, g: &mut Graph<'_>) -> Result<Var> {
        self(g)
    }
}

fn checked_scalar(g: &Graph<'_>, v: Var) -> Result<f64> {
    let s = g.scalar(v)?;
    if s.is_finite() {
        Ok(s)
    } else {
        Err(KernelError::NonFinite("expression"))
    }
}

pub fn eval_scalar(expr: &impl ScalarExpression, bindings: &Bindings) -> Result<f64> {
    let mut g = Graph::with_bindings(bindings);
    let out = expr.build(&mut g)?;
    checked_scalar(&g, out)
}

/// Gradient of `expr` with respect to each named binding in `wrt`, shaped
/// like the binding.
pub fn gradient(
    expr: &impl ScalarExpression,
    wrt: &[&str],
    bindings: &Bindings,
) -> Result<BTreeMap<String, Array>> {
    let mut g = Graph::with_bindings(bindings);
    let out = expr.build(&mut g)?;
    checked_scalar(&g, out)?;
    let vars = wrt
        .iter()
        .map(|name| g.input(name))
        .collect::<Result<Vec<_>>>()?;
    let grads = g.grad(out, &vars)?;
    wrt.iter()
        .zip(grads)
        .map(|(name, gv)| {
            let shape = bindings[*name].shape().to_vec();
            let arr = g.value(gv).clone().reshape(shape)?;
            Ok((name.to_string(), arr))
        })
        .collect()
}

/// Central-difference gradient of `expr`, one binding element at a time.
pub fn finite_difference(
    expr: &impl ScalarExpression,
    wrt: &[&str],
    bindings: &Bindings,
    step: f64,
) -> Result<BTreeMap<String, Array>> {
    if step.is_nan() || step <= 0.0 {
        return Err(KernelError::BadStep(step));
    }
    let mut work = bindings.clone();
    let mut out = BTreeMap::new();
    for &name in wrt {
        let base = bindings
            .get(name)
            .ok_or_else(|| KernelError::Unbound(name.to_string()))?;
        let mut grad = Array::zeros(base.shape());
        for k in 0..base.len() {
            let x0 = base.data()[k];
            work.get_mut(name).unwrap().data_mut()[k] = x0 + step;
            let fp = eval_scalar(expr, &work)?;
            work.get_mut(name).unwrap().data_mut()[k] = x0 - step;
            let fm = eval_scalar(expr, &work)?;
            work.get_mut(name).unwrap().data_mut()[k] = x0;
            grad.data_mut()[k] = (fp - fm) / (2.0 * step);
        }
        out.insert(name.to_string(), grad);
    }
    Ok(out)
}
