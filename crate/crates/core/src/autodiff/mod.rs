//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in forward execution order. Values live
//! on the tape; a [`Tensor`] is a cheap `Copy` handle into it. Calling
//! [`Tape::backward`] walks the records strictly in reverse and accumulates
//! `∂loss/∂node` for every node that (transitively) depends on a tracked
//! leaf. Gradients from fan-out are summed.
//!
//! ```
//! use cesaa_core::{autodiff::Tape, Matrix};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
//! let loss = tape.sum(w);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap(), &Matrix::ones(2, 2));
//! ```
//!
//! Tapes are single-use: build one per forward/backward pass.

mod gradcheck;

pub use gradcheck::{fd_check, FdReport};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use std::sync::atomic::{AtomicU64, Ordering};

/// Floor applied to the input of [`Tape::log`].
pub const LOG_FLOOR: f64 = 1e-12;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    tape_id: u64,
}

impl Tensor {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Log(usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MaskedSoftmax(usize),
    ConcatCols(usize, usize),
    Sum(usize),
    RowSums(usize),
    ColSums(usize),
    GatherRows(usize, Vec<usize>),
    ScatterRows(usize, Vec<usize>),
    ScaleRows(usize, usize),
    Column(usize, usize),
}

struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Ordered record of operations plus the gradients of the last backward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tracked leaf (a trainable parameter).
    pub fn param(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Leaf, true)
    }

    /// Records an untracked leaf. No gradient is ever computed for it.
    pub fn constant(&mut self, value: Matrix) -> Tensor {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.node(t).value
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        self.node(t).value.shape()
    }

    /// Gradient from the most recent [`Tape::backward`], if `t` was reached.
    pub fn grad(&self, t: Tensor) -> Option<&Matrix> {
        self.check(t);
        self.grads.get(t.id).and_then(Option::as_ref)
    }

    pub fn is_tracked(&self, t: Tensor) -> bool {
        self.node(t).tracked
    }

    fn check(&self, t: Tensor) {
        assert_eq!(
            t.tape_id, self.id,
            "tensor from tape {} used on tape {}",
            t.tape_id, self.id
        );
    }

    fn node(&self, t: Tensor) -> &Node {
        self.check(t);
        &self.nodes[t.id]
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Tensor {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, tracked });
        Tensor {
            id,
            tape_id: self.id,
        }
    }

    fn tracked(&self, parents: &[Tensor]) -> bool {
        parents.iter().any(|&p| self.node(p).tracked)
    }

    fn unary(&mut self, a: Tensor, value: Matrix, op: Op) -> Tensor {
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Tensor, b: Tensor, value: Matrix, op: Op) -> Tensor {
        let tracked = self.tracked(&[a, b]);
        self.push(value, op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = self.value(a).matmul(self.value(b));
        Ok(self.binary(a, b, value, Op::MatMul(a.id, b.id)))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.binary(a, b, value, Op::Add(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.binary(a, b, value, Op::Mul(a.id, b.id)))
    }

    /// Adds a `1 x n` bias row to every row of a `m x n` tensor.
    pub fn add_row_bias(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.0 != 1 || sb.1 != sa.1 {
            return Err(Error::shape("add_row_bias", sa, sb));
        }
        let mut value = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..sa.0 {
            for (v, bv) in value.row_mut(r).iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.binary(a, bias, value, Op::AddRowBias(a.id, bias.id)))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(|x| x.max(0.0));
        self.unary(a, value, Op::Relu(a.id))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(sigmoid);
        self.unary(a, value, Op::Sigmoid(a.id))
    }

    pub fn softplus(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(softplus);
        self.unary(a, value, Op::Softplus(a.id))
    }

    /// Natural log of `max(a, LOG_FLOOR)`. The gradient is zero where the
    /// floor is active.
    pub fn log(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        self.unary(a, value, Op::Log(a.id))
    }

    pub fn neg(&mut self, a: Tensor) -> Tensor {
        let value = self.value(a).map(|x| -x);
        self.unary(a, value, Op::Neg(a.id))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = self.value(a).scale(c);
        self.unary(a, value, Op::Scale(a.id, c))
    }

    pub fn add_scalar(&mut self, a: Tensor, c: f64) -> Tensor {
        let value = self.value(a).map(|x| x + c);
        self.unary(a, value, Op::AddScalar(a.id))
    }

    /// Row-wise softmax over the entries where `mask` is true; masked entries
    /// are exactly zero. `mask` is row-major with the same shape as `logits`.
    pub fn masked_softmax(&mut self, logits: Tensor, mask: &[bool]) -> Result<Tensor> {
        let value = masked_softmax_values(self.value(logits), mask)?;
        Ok(self.unary(logits, value, Op::MaskedSoftmax(logits.id)))
    }

    /// Plain row-wise softmax.
    pub fn softmax(&mut self, logits: Tensor) -> Result<Tensor> {
        let mask = vec![true; self.value(logits).len()];
        self.masked_softmax(logits, &mask)
    }

    pub fn concat_cols(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::shape("concat_cols", sa, sb));
        }
        let mut value = Matrix::zeros(sa.0, sa.1 + sb.1);
        for r in 0..sa.0 {
            let row = value.row_mut(r);
            row[..sa.1].copy_from_slice(self.value(a).row(r));
            row[sa.1..].copy_from_slice(self.value(b).row(r));
        }
        Ok(self.binary(a, b, value, Op::ConcatCols(a.id, b.id)))
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let value = Matrix::scalar(self.value(a).sum());
        self.unary(a, value, Op::Sum(a.id))
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `m x n -> m x 1`.
    pub fn row_sums(&mut self, a: Tensor) -> Tensor {
        let sums = self.value(a).row_sums();
        let value = Matrix::from_vec(sums.len(), 1, sums);
        self.unary(a, value, Op::RowSums(a.id))
    }

    /// `m x n -> 1 x n`.
    pub fn col_sums(&mut self, a: Tensor) -> Tensor {
        let sums = self.value(a).col_sums();
        let value = Matrix::from_vec(1, sums.len(), sums);
        self.unary(a, value, Op::ColSums(a.id))
    }

    /// Selects rows by index (repeats allowed). This is also the embedding
    /// lookup: gradients scatter-add back into the selected rows.
    pub fn gather_rows(&mut self, a: Tensor, indices: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", (rows, cols), (bad, 0)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(src.row(i));
        }
        let value = Matrix::from_vec(indices.len(), cols, data);
        Ok(self.unary(a, value, Op::GatherRows(a.id, indices.to_vec())))
    }

    /// Places row `i` of `a` at row `indices[i]` of a zero `rows x cols`
    /// output. Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Tensor, indices: &[usize], rows: usize) -> Result<Tensor> {
        let (a_rows, cols) = self.shape(a);
        if indices.len() != a_rows || indices.iter().any(|&i| i >= rows) {
            return Err(Error::shape(
                "scatter_rows",
                (a_rows, cols),
                (rows, indices.len()),
            ));
        }
        let mut value = Matrix::zeros(rows, cols);
        for (src, &dst) in indices.iter().enumerate() {
            value.row_mut(dst).copy_from_slice(self.value(a).row(src));
        }
        Ok(self.unary(a, value, Op::ScatterRows(a.id, indices.to_vec())))
    }

    /// Multiplies row `r` of `a` (`m x n`) by `s[r]` (`s` is `m x 1`).
    pub fn scale_rows(&mut self, a: Tensor, s: Tensor) -> Result<Tensor> {
        let (sa, ss) = (self.shape(a), self.shape(s));
        if ss != (sa.0, 1) {
            return Err(Error::shape("scale_rows", sa, ss));
        }
        let mut value = self.value(a).clone();
        for r in 0..sa.0 {
            let f = self.value(s).get(r, 0);
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.binary(a, s, value, Op::ScaleRows(a.id, s.id)))
    }

    /// Column `j` of `a` as an `m x 1` tensor.
    pub fn column(&mut self, a: Tensor, j: usize) -> Result<Tensor> {
        let (rows, cols) = self.shape(a);
        if j >= cols {
            return Err(Error::shape("column", (rows, cols), (0, j)));
        }
        let src = self.value(a);
        let value = Matrix::from_vec(rows, 1, (0..rows).map(|r| src.get(r, j)).collect());
        Ok(self.unary(a, value, Op::Column(a.id, j)))
    }

    /// Computes `∂loss/∂t` for every tracked node reachable from `loss`.
    /// Replaces the gradients of any earlier backward pass.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Matrix::ones(1, 1));

        for i in (0..=loss.id).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut send = |j: usize, contrib: Matrix| {
            if !self.nodes[j].tracked {
                return;
            }
            match &mut grads[j] {
                Some(acc) => acc.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        match node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if self.nodes[a].tracked {
                    send(a, g.matmul_t(val(b)));
                }
                if self.nodes[b].tracked {
                    send(b, val(a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                send(a, g.clone());
                send(b, g.clone());
            }
            Op::Mul(a, b) => {
                send(a, g.zip_map(val(b), |d, y| d * y));
                send(b, g.zip_map(val(a), |d, x| d * x));
            }
            Op::AddRowBias(a, b) => {
                send(a, g.clone());
                let sums = g.col_sums();
                send(b, Matrix::from_vec(1, sums.len(), sums));
            }
            Op::Relu(a) => send(a, g.zip_map(val(a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Sigmoid(a) => send(a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::Softplus(a) => send(a, g.zip_map(val(a), |d, x| d * sigmoid(x))),
            Op::Log(a) => send(
                a,
                g.zip_map(val(a), |d, x| if x > LOG_FLOOR { d / x } else { 0.0 }),
            ),
            Op::Neg(a) => send(a, g.scale(-1.0)),
            Op::Scale(a, c) => send(a, g.scale(c)),
            Op::AddScalar(a) => send(a, g.clone()),
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut out = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in out.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                send(a, out);
            }
            Op::ConcatCols(a, b) => {
                let p = val(a).cols();
                let q = val(b).cols();
                let mut ga = Matrix::zeros(g.rows(), p);
                let mut gb = Matrix::zeros(g.rows(), q);
                for r in 0..g.rows() {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..p]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[p..]);
                }
                send(a, ga);
                send(b, gb);
            }
            Op::Sum(a) => {
                let (r, c) = val(a).shape();
                send(a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::RowSums(a) => {
                let (r, c) = val(a).shape();
                let mut out = Matrix::zeros(r, c);
                for row in 0..r {
                    let d = g.get(row, 0);
                    out.row_mut(row).iter_mut().for_each(|v| *v = d);
                }
                send(a, out);
            }
            Op::ColSums(a) => {
                let (r, c) = val(a).shape();
                let mut out = Matrix::zeros(r, c);
                for row in 0..r {
                    out.row_mut(row).copy_from_slice(g.row(0));
                }
                send(a, out);
            }
            Op::GatherRows(a, ref indices) => {
                let (r, c) = val(a).shape();
                let mut out = Matrix::zeros(r, c);
                for (src, &dst) in indices.iter().enumerate() {
                    for (o, d) in out.row_mut(dst).iter_mut().zip(g.row(src)) {
                        *o += d;
                    }
                }
                send(a, out);
            }
            Op::ScatterRows(a, ref indices) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(indices.len() * c);
                for &dst in indices {
                    data.extend_from_slice(g.row(dst));
                }
                send(a, Matrix::from_vec(indices.len(), c, data));
            }
            Op::ScaleRows(a, s) => {
                let (av, sv) = (val(a), val(s));
                if self.nodes[a].tracked {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let f = sv.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    }
                    send(a, ga);
                }
                if self.nodes[s].tracked {
                    let gs = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(d, x)| d * x).sum())
                        .collect();
                    send(s, Matrix::from_vec(g.rows(), 1, gs));
                }
            }
            Op::Column(a, j) => {
                let (r, c) = val(a).shape();
                let mut out = Matrix::zeros(r, c);
                for row in 0..r {
                    out.set(row, j, g.get(row, 0));
                }
                send(a, out);
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` in the overflow-safe form `max(z, 0) + ln(1 + e^{-|z|})`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn masked_softmax_values(logits: &Matrix, mask: &[bool]) -> Result<Matrix> {
    if mask.len() != logits.len() {
        return Err(Error::shape(
            "masked_softmax",
            logits.shape(),
            (mask.len(), 1),
        ));
    }
    let (rows, cols) = logits.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let keep = &mask[r * cols..(r + 1) * cols];
        let row = logits.row(r);
        let max = row
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidMask { row: r });
        }
        let out_row = out.row_mut(r);
        let mut total = 0.0;
        for ((o, &v), &k) in out_row.iter_mut().zip(row).zip(keep) {
            if k {
                *o = (v - max).exp();
                total += *o;
            }
        }
        out_row.iter_mut().for_each(|o| *o /= total);
    }
    Ok(out)
}
