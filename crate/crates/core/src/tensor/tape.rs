//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every forward op appends one entry holding its output value and the
//! operands it read. [`Tape::backward`] walks the entries in reverse and
//! applies each entry's vector-Jacobian product once.

use std::collections::HashMap;

use super::dense::{mm_nn, mm_nt, mm_tn};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Reference to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    Log(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
}

impl Op {
    fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Param(_))
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Summary of one backward sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Op entries at or before the loss that were visited.
    pub visited: usize,
    /// Entries whose backward rule ran (those that received a gradient).
    pub applied: usize,
}

/// Gradients of a scalar loss with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    pub report: BackwardReport,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    entries: usize,
}

fn add_into(acc: &mut Option<Vec<f64>>, src: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(src).for_each(|(x, y)| *x += y),
        None => *acc = Some(src.to_vec()),
    }
}

fn acc_slot(acc: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    acc.get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of non-leaf entries recorded so far.
    pub fn entries(&self) -> usize {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if !op.is_leaf() {
            self.entries += 1;
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records a parameter as a leaf. Repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// The parameter behind a leaf, if `v` is one.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected a 2-d operand, got {s:?}"))),
        }
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.val(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        mm_nn(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Batched product of `[b, m, k]` with `[b, k, n]`, or with `[b, n, k]`
    /// transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"));
        let (&[ba, m, k], &[bb, x, y]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(bad());
        };
        let (kb, n) = if transpose_b { (y, x) } else { (x, y) };
        if ba != bb || k != kb {
            return Err(bad());
        }
        let (ad, bd) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            let a_blk = &ad[i * m * k..(i + 1) * m * k];
            let b_blk = &bd[i * k * n..(i + 1) * k * n];
            let o_blk = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                mm_nt(a_blk, b_blk, o_blk, m, k, n);
            } else {
                mm_nn(a_blk, b_blk, o_blk, m, k, n);
            }
        }
        Ok(self.push(Tensor::new(vec![ba, m, n], out)?, Op::BatchMatMul { a, b, transpose_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a vector of length `cols` to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.val(a).cols();
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let b = self.val(bias).data();
        let mut data = self.val(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise-multiply", a, b)?;
        let data = self.val(a).data().iter().zip(self.val(b).data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies row `i` of `a` by `scales[i]`, where `scales` is `[rows, 1]`.
    pub fn scale_rows(&mut self, a: Var, scales: Var) -> Result<Var> {
        let (rows, cols) = (self.val(a).rows(), self.val(a).cols());
        if self.shape(scales) != [rows, 1] {
            return Err(Error::shape("scale_rows", format!("{:?} by {:?}", self.shape(a), self.shape(scales))));
        }
        let s = self.val(scales).data();
        let mut data = self.val(a).data().to_vec();
        for (row, &k) in data.chunks_mut(cols).zip(s) {
            row.iter_mut().for_each(|x| *x *= k);
        }
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(a, scales)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.val(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive operand {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Softmax along the last axis, with the row maximum subtracted first.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push(out, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.val(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Concatenates along the last axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no operands"));
        };
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows = self.val(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", self.shape(first), s)));
            }
            widths.push(self.val(p).cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.val(a);
        let cols = x.cols();
        if x.shape().is_empty() || start >= end || end > cols {
            return Err(Error::shape("slice", format!("{start}..{end} of {:?}", x.shape())));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(x.rows() * w);
        for row in x.data().chunks(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceCols(a, start, end)))
    }

    /// Stacks 2-d operands with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no operands"));
        };
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{:?} vs {:?}", self.shape(first), self.shape(p))));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.val(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..end` of a 2-d operand.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_rows", a)?;
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {:?}", self.shape(a))));
        }
        let data = self.val(a).data()[start * cols..end * cols].to_vec();
        Ok(self.push(Tensor::new(vec![end - start, cols], data)?, Op::SliceRows(a, start, end)))
    }

    /// Selects rows of a 2-d operand by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("gather_rows", a)?;
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {rows}")));
        }
        let x = self.val(a).data();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let x = self.val(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        Ok(self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `x W + b` for a `[rows, in]` input, `[in, out]` weight and `[out]` bias.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.val(loss).is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut report = BackwardReport { visited: 0, applied: 0 };
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if node.op.is_leaf() {
                continue;
            }
            report.visited += 1;
            let Some(g) = grads[idx].take() else { continue };
            report.applied += 1;
            self.apply_rule(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, report })
    }

    /// Back-propagates and adds each parameter leaf's gradient into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<BackwardReport> {
        let grads = self.backward(loss)?;
        for (&id, &var) in &self.params {
            if let Some(g) = grads.wrt(var) {
                let p = store.get_mut(id);
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(grads.report)
    }

    fn apply_rule(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let n = self.val(*b).shape()[1];
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                mm_nt(g, bd, acc_slot(&mut grads[a.0], m * k), m, n, k);
                mm_tn(ad, g, acc_slot(&mut grads[b.0], k * n), m, k, n);
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = self.val(*a).shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                let ga = acc_slot(&mut grads[a.0], batch * m * k);
                for i in 0..batch {
                    let gb = &g[i * m * n..(i + 1) * m * n];
                    let bb = &bd[i * k * n..(i + 1) * k * n];
                    let ga_blk = &mut ga[i * m * k..(i + 1) * m * k];
                    if *transpose_b {
                        // C = A B^T with B [n, k]: dA = dC B
                        mm_nn(gb, bb, ga_blk, m, n, k);
                    } else {
                        mm_nt(gb, bb, ga_blk, m, n, k);
                    }
                }
                let gbv = acc_slot(&mut grads[b.0], batch * k * n);
                for i in 0..batch {
                    let gc = &g[i * m * n..(i + 1) * m * n];
                    let ab = &ad[i * m * k..(i + 1) * m * k];
                    let gb_blk = &mut gbv[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // dB = dC^T A, shape [n, k]
                        mm_tn(gc, ab, gb_blk, m, n, k);
                    } else {
                        mm_tn(ab, gc, gb_blk, m, k, n);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(&mut grads[a.0], g);
                add_into(&mut grads[b.0], g);
            }
            Op::AddBias(a, bias) => {
                add_into(&mut grads[a.0], g);
                let cols = out.cols();
                let gb = acc_slot(&mut grads[bias.0], cols);
                for row in g.chunks(cols) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                add_into(&mut grads[a.0], g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                add_into(&mut grads[b.0], &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.val(*b).data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.val(*a).data()).map(|(x, y)| x * y).collect();
                add_into(&mut grads[a.0], &ga);
                add_into(&mut grads[b.0], &gb);
            }
            Op::ScaleRows(a, s) => {
                let cols = out.cols();
                let sd = self.val(*s).data();
                let ad = self.val(*a).data();
                let ga = acc_slot(&mut grads[a.0], ad.len());
                for ((gr, dst), &k) in g.chunks(cols).zip(ga.chunks_mut(cols)).zip(sd) {
                    dst.iter_mut().zip(gr).for_each(|(d, x)| *d += x * k);
                }
                let gs = acc_slot(&mut grads[s.0], sd.len());
                for ((gr, ar), d) in g.chunks(cols).zip(ad.chunks(cols)).zip(gs.iter_mut()) {
                    *d += gr.iter().zip(ar).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::Scale(a, k) => {
                let ga: Vec<f64> = g.iter().map(|x| x * k).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * (1.0 - y * y)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Sigmoid(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * y * (1.0 - y)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Softplus(a) => {
                let ga: Vec<f64> = g.iter().zip(self.val(*a).data()).map(|(x, &z)| x * sigmoid(z)).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), dst) in g.chunks(cols).zip(out.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, x), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (x - dot);
                    }
                }
                add_into(&mut grads[a.0], &ga);
            }
            Op::Log(a) => {
                let ga: Vec<f64> = g.iter().zip(self.val(*a).data()).map(|(x, y)| x / y).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Exp(a) => {
                let ga: Vec<f64> = g.iter().zip(out.data()).map(|(x, y)| x * y).collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Abs(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(x, &y)| if y > 0.0 { *x } else if y < 0.0 { -x } else { 0.0 })
                    .collect();
                add_into(&mut grads[a.0], &ga);
            }
            Op::Sum(a) => {
                let n = self.val(*a).len();
                let slot = acc_slot(&mut grads[a.0], n);
                slot.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Mean(a) => {
                let n = self.val(*a).len();
                let share = g[0] / n as f64;
                let slot = acc_slot(&mut grads[a.0], n);
                slot.iter_mut().for_each(|x| *x += share);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.val(*p).cols();
                    let n = self.val(*p).len();
                    let slot = acc_slot(&mut grads[p.0], n);
                    for (dst, src) in slot.chunks_mut(w).zip(g.chunks(total)) {
                        dst.iter_mut().zip(&src[offset..offset + w]).for_each(|(d, s)| *d += s);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let x = self.val(*a);
                let (cols, w) = (x.cols(), end - start);
                let slot = acc_slot(&mut grads[a.0], x.len());
                for (dst, src) in slot.chunks_mut(cols).zip(g.chunks(w)) {
                    dst[*start..*end].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.val(*p).len();
                    add_into(&mut grads[p.0], &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows(a, start, end) => {
                let x = self.val(*a);
                let cols = x.cols();
                let slot = acc_slot(&mut grads[a.0], x.len());
                slot[start * cols..end * cols].iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            Op::GatherRows(a, indices) => {
                let x = self.val(*a);
                let cols = x.cols();
                let slot = acc_slot(&mut grads[a.0], x.len());
                for (&i, src) in indices.iter().zip(g.chunks(cols)) {
                    slot[i * cols..(i + 1) * cols].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                let slot = acc_slot(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        slot[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::new();
        let x = Tensor::matrix(3, 2, vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]).unwrap();
        let i = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        let y = tape.matmul(i, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[0.0, 0.0, 0.0]);
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        assert_eq!(tape.value(s).data(), &[5.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares_is_twice_input() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn gradient_of_mean_is_uniform_share() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[3.0, -1.0, 2.0, 7.0]);
        let m = tape.mean(x);
        let g = tape.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 2.0]);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[1.0, 0.0]);
        assert!(matches!(tape.log(x), Err(Error::Domain { op: "log", .. })));
        let y = vec_var(&mut tape, &[1.0, -3.0]);
        assert!(tape.log(y).is_err());
    }

    #[test]
    fn backward_applies_each_entry_once() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[0.3, -0.2, 0.9]);
        let a = tape.tanh(x);
        let b = tape.exp(a);
        let c = tape.scale(b, 2.0);
        let d = tape.mean(c);
        assert_eq!(tape.entries(), 4);
        let g = tape.backward(d).unwrap();
        assert_eq!(g.report, BackwardReport { visited: 4, applied: 4 });
    }

    #[test]
    fn param_leaves_are_shared_within_a_tape() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.mul(a, b).unwrap();
        let l = tape.sum(s);
        tape.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let x = vec_var(&mut tape, &[800.0, -800.0, 0.0]);
        let y = tape.softplus(x);
        let v = tape.value(y).data();
        assert_eq!(v[0], 800.0);
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
        assert!((v[2] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
