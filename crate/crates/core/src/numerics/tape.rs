//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! Every op evaluates eagerly and appends a node to the tape; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products. Nodes
//! that do not depend on any parameter are never visited.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{Tensor2, LEAKY_RELU_SLOPE};
use super::{leaky_relu, sigmoid, NumericsError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    LeakyRelu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    Square(usize),
    Min(usize, usize),
    Cols(usize, usize),
    ConcatCols(Vec<usize>),
    PickCols(usize, Vec<usize>),
    Mean(usize),
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the leaf `var`; zeros when the loss does not
    /// depend on it. Intermediate nodes are not retained.
    pub fn wrt(&self, var: Var) -> Result<Tensor2, NumericsError> {
        if var.tape != self.tape || var.index >= self.grads.len() {
            return Err(NumericsError::Usage(
                "variable does not belong to the differentiated tape".to_string(),
            ));
        }
        Ok(match &self.grads[var.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.index];
                Tensor2::zeros(r, c)
            }
        })
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            nodes: Vec::new(),
        }
    }

    /// Drops all recorded nodes. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = fresh_id();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, var: Var) -> Result<usize, NumericsError> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(NumericsError::Usage(
                "variable was not recorded on this tape".to_string(),
            ));
        }
        Ok(var.index)
    }

    fn push(&mut self, value: Tensor2, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor2, NumericsError> {
        let i = self.idx(var)?;
        Ok(&self.nodes[i].value)
    }

    fn unary(&mut self, a: Var, f: impl FnOnce(&Tensor2) -> Result<Tensor2, NumericsError>, op: impl FnOnce(usize) -> Op) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let value = f(&self.nodes[ia].value)?;
        let rg = self.rg(ia);
        Ok(self.push(value, op(ia), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl FnOnce(&Tensor2, &Tensor2) -> Result<Tensor2, NumericsError>,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let ib = self.idx(b)?;
        let value = f(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, op(ia, ib), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x.matmul(y), Op::MatMul)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x.matmul_t(y), Op::MatMulT)
    }

    /// `a` plus a broadcast 1 x cols row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        self.binary(a, row, |x, y| x.add_row(y), Op::AddRow)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x.add(y), Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x.sub(y), Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x.hadamard(y), Op::Mul)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, |x, y| x.zip_map(y, f64::min), Op::Min)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.scale(factor)), |i| Op::Scale(i, factor))
    }

    /// Adds a constant to every entry.
    pub fn offset(&mut self, a: Var, shift: f64) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.map(|v| v + shift)), Op::Offset)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.map(leaky_relu)), Op::LeakyRelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.map(sigmoid)), Op::Sigmoid)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.softmax_rows()), Op::SoftmaxRows)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.log_softmax_rows()), Op::LogSoftmaxRows)
    }

    /// Natural log; the input must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.map(f64::ln)), Op::Ln)
    }

    /// Clamps into `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.map(|v| v.clamp(lo, hi))), |i| Op::Clamp(i, lo, hi))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(x.map(|v| v * v)), Op::Square)
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.unary(a, |x| x.cols_range(start, len), |i| Op::Cols(i, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idx = parts
            .iter()
            .map(|&p| self.idx(p))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Tensor2> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let value = Tensor2::concat_cols(&refs)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(value, Op::ConcatCols(idx), rg))
    }

    /// Picks one column per row, producing a rows x 1 column.
    pub fn pick_cols(&mut self, a: Var, columns: &[usize]) -> Result<Var, NumericsError> {
        let ia = self.idx(a)?;
        let src = &self.nodes[ia].value;
        if columns.len() != src.rows() || columns.iter().any(|&c| c >= src.cols()) {
            return Err(NumericsError::Dimension(format!(
                "pick_cols: {} indices for a {:?} tensor",
                columns.len(),
                src.shape()
            )));
        }
        let picked = columns
            .iter()
            .enumerate()
            .map(|(r, &c)| src.get(r, c))
            .collect();
        let rg = self.rg(ia);
        Ok(self.push(Tensor2::column(picked), Op::PickCols(ia, columns.to_vec()), rg))
    }

    /// Mean of all entries as a 1x1 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(Tensor2::scalar(x.mean())), Op::Mean)
    }

    /// Sum of all entries as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, |x| Ok(Tensor2::scalar(x.sum())), Op::Sum)
    }

    /// Elementwise mean of same-shaped values, summed left to right.
    pub fn average(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let (&first, rest) = parts.split_first().ok_or_else(|| {
            NumericsError::Usage("cannot average an empty list".to_string())
        })?;
        let mut acc = first;
        for &p in rest {
            acc = self.add(acc, p)?;
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Reverse sweep from a 1x1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::Usage(
                "backward called on an empty tape".to_string(),
            ));
        }
        let li = self.idx(loss)?;
        if self.nodes[li].value.shape() != (1, 1) {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; li + 1];
        grads[li] = Some(Tensor2::scalar(1.0));

        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let val = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let da = g.matmul_t(val(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.rg(*b) {
                        let db = val(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        let da = g.matmul(val(*b))?;
                        accumulate(&mut grads, *a, da)?;
                    }
                    if self.rg(*b) {
                        let db = g.t_matmul(val(*a))?;
                        accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads, *row, g.sum_rows())?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone())?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.scale(-1.0))?;
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g)?;
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.hadamard(val(*b))?)?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.hadamard(val(*a))?)?;
                    }
                }
                Op::Min(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if self.rg(*a) {
                        let mask = va.zip_map(vb, |x, y| if x <= y { 1.0 } else { 0.0 })?;
                        accumulate(&mut grads, *a, g.hadamard(&mask)?)?;
                    }
                    if self.rg(*b) {
                        let mask = va.zip_map(vb, |x, y| if x <= y { 0.0 } else { 1.0 })?;
                        accumulate(&mut grads, *b, g.hadamard(&mask)?)?;
                    }
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scale(*factor))?,
                Op::Offset(a) => accumulate(&mut grads, *a, g)?,
                Op::LeakyRelu(a) => {
                    let d = val(*a).zip_map(&g, |x, gv| {
                        if x > 0.0 {
                            gv
                        } else {
                            LEAKY_RELU_SLOPE * gv
                        }
                    })?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = node.value.zip_map(&g, |s, gv| gv * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let mut d = Vec::with_capacity(s.len());
                    for r in 0..s.rows() {
                        let (sr, gr) = (s.row(r), g.row(r));
                        let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        d.extend(sr.iter().zip(gr).map(|(x, y)| x * (y - dot)));
                    }
                    accumulate(&mut grads, *a, Tensor2::new(s.rows(), s.cols(), d)?)?;
                }
                Op::LogSoftmaxRows(a) => {
                    let l = &node.value;
                    let mut d = Vec::with_capacity(l.len());
                    for r in 0..l.rows() {
                        let (lr, gr) = (l.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        d.extend(lr.iter().zip(gr).map(|(x, y)| y - x.exp() * total));
                    }
                    accumulate(&mut grads, *a, Tensor2::new(l.rows(), l.cols(), d)?)?;
                }
                Op::Ln(a) => {
                    let d = g.zip_map(val(*a), |gv, x| gv / x)?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let d = g.zip_map(val(*a), |gv, x| if x < *lo || x > *hi { 0.0 } else { gv })?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Square(a) => {
                    let d = g.zip_map(val(*a), |gv, x| 2.0 * x * gv)?;
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Cols(a, start) => {
                    let src = val(*a);
                    let mut d = Tensor2::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            d.set(r, start + c, g.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let width = val(p).cols();
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.cols_range(start, width)?)?;
                        }
                        start += width;
                    }
                }
                Op::PickCols(a, columns) => {
                    let src = val(*a);
                    let mut d = Tensor2::zeros(src.rows(), src.cols());
                    for (r, &c) in columns.iter().enumerate() {
                        d.set(r, c, g.get(r, 0));
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Mean(a) => {
                    let src = val(*a);
                    let d = Tensor2::filled(src.rows(), src.cols(), g.item() / src.len() as f64);
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let src = val(*a);
                    accumulate(&mut grads, *a, Tensor2::filled(src.rows(), src.cols(), g.item()))?;
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], index: usize, delta: Tensor2) -> Result<(), NumericsError> {
    let slot = &mut grads[index];
    *slot = Some(match slot.take() {
        Some(existing) => existing.add(&delta)?,
        None => delta,
    });
    Ok(())
}
