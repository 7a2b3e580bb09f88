//! Reverse-mode differentiation over a recorded tape of tensor primitives.
//!
//! A [`Tape`] borrows a [`ParameterSet`] immutably while a forward pass is
//! recorded. Each primitive appends one node; [`Tape::backward`] walks the
//! nodes in reverse creation order, which is a valid topological order since
//! a node can only reference nodes created before it.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParameterSet};
use crate::tensor::{dot, gemm, matmul_into, transpose, Tensor};

/// Epsilon of the layer-normalization primitive.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Affine(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Gather(usize, Vec<usize>),
    RowNorm(usize, Norm),
    SumRows(usize),
    Sum(usize),
    Mean(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Gelu(usize),
    Sin(usize),
    Cos(usize),
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Dropout(usize, Vec<f64>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    /// `None` for parameter leaves, whose value lives in the parameter set.
    value: Option<Tensor>,
    op: Op,
}

/// Recording of one forward computation.
pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<ParamId, usize>>,
    training: bool,
}

/// A value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'a> {
    tape: &'a Tape<'a>,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<'p> Tape<'p> {
    /// A tape in evaluation mode: dropout is the identity.
    pub fn new(params: &'p ParameterSet) -> Self {
        Tape {
            params,
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            training: false,
        }
    }

    pub fn training(params: &'p ParameterSet) -> Self {
        Tape {
            training: true,
            ..Tape::new(params)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Some(value), Op::Leaf)
    }

    pub fn param(&self, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.push(None, Op::Param(id));
        self.param_nodes.borrow_mut().insert(id, var.id);
        var
    }

    fn push(&self, value: Option<Tensor>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of<'n>(&'n self, nodes: &'n [Node], id: usize) -> &'n Tensor {
        match (&nodes[id].value, &nodes[id].op) {
            (Some(v), _) => v,
            (None, Op::Param(pid)) => self.params.value(*pid),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn with_value<R>(&self, id: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(self.value_of(&nodes, id))
    }

    fn with_values<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(self.value_of(&nodes, a), self.value_of(&nodes, b))
    }

    /// Gradients of the scalar `loss` with respect to every parameter
    /// referenced on this tape. Unreached parameters get no entry.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = self.value_of(&nodes, loss.id);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));

        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let val = |i: usize| self.value_of(&nodes, i);
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => match &mut out.grads[pid.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|v| -v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    accumulate(&mut grads, *a, zip_map(&g, bv, |gi, bi| gi * bi));
                    accumulate(&mut grads, *b, zip_map(&g, av, |gi, ai| gi * ai));
                }
                Op::AddRow(x, b) => {
                    let bv = val(*b);
                    let mut gb = Tensor::zeros(bv.shape());
                    for r in 0..g.rows() {
                        for (acc, gi) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += gi;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::MulRow(x, s) => {
                    let (xv, sv) = (val(*x), val(*s));
                    let mut gs = Tensor::zeros(sv.shape());
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let xr = xv.row(r);
                        for c in 0..gr.len() {
                            gs.data_mut()[c] += gr[c] * xr[c];
                        }
                        for (gxi, si) in gx.row_mut(r).iter_mut().zip(sv.data()) {
                            *gxi *= si;
                        }
                    }
                    accumulate(&mut grads, *s, gs);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Affine(x, scale) => {
                    let scale = *scale;
                    accumulate(&mut grads, *x, g.map(|v| v * scale));
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    // dA = dC * B^T, dB = A^T * dC
                    let ga = gemm(m, n, k, g.data(), [n, 1], bv.data(), [1, n]);
                    let gb = gemm(k, m, n, av.data(), [1, k], g.data(), [n, 1]);
                    accumulate(&mut grads, *a, Tensor::new(vec![m, k], ga)?);
                    accumulate(&mut grads, *b, Tensor::new(vec![k, n], gb)?);
                }
                Op::Transpose(x) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    accumulate(&mut grads, *x, Tensor::new(vec![c, r], transpose(g.data(), r, c))?);
                }
                Op::Gather(table, idx) => {
                    let tv = val(*table);
                    let mut gt = Tensor::zeros(tv.shape());
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, gi) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += gi;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::RowNorm(x, norm) => {
                    let xv = val(*x);
                    let yv = node.value.as_ref().expect("row norm value");
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        let gr = g.data()[r];
                        let y = yv.data()[r];
                        for (o, &xi) in gx.row_mut(r).iter_mut().zip(xv.row(r)) {
                            *o = match norm {
                                Norm::L1 => gr * sign(xi),
                                Norm::L2 if y > 0.0 => gr * xi / y,
                                Norm::L2 => 0.0,
                            };
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumRows(x) => {
                    let xv = val(*x);
                    let mut gx = Tensor::zeros(xv.shape());
                    for r in 0..xv.rows() {
                        gx.row_mut(r).fill(g.data()[r]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let xv = val(*x);
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g.data()[0]));
                }
                Op::Mean(x) => {
                    let xv = val(*x);
                    let n = xv.len().max(1) as f64;
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g.data()[0] / n));
                }
                Op::Sigmoid(x) => {
                    let yv = node.value.as_ref().expect("sigmoid value");
                    accumulate(&mut grads, *x, zip_map(&g, yv, |gi, y| gi * y * (1.0 - y)));
                }
                Op::LogSigmoid(x) => {
                    let xv = val(*x);
                    accumulate(&mut grads, *x, zip_map(&g, xv, |gi, xi| gi * sigmoid(-xi)));
                }
                Op::Gelu(x) => {
                    let xv = val(*x);
                    accumulate(&mut grads, *x, zip_map(&g, xv, |gi, xi| gi * gelu_grad(xi)));
                }
                Op::Sin(x) => {
                    let xv = val(*x);
                    accumulate(&mut grads, *x, zip_map(&g, xv, |gi, xi| gi * xi.cos()));
                }
                Op::Cos(x) => {
                    let xv = val(*x);
                    accumulate(&mut grads, *x, zip_map(&g, xv, |gi, xi| -gi * xi.sin()));
                }
                Op::Softmax(x) => {
                    let yv = node.value.as_ref().expect("softmax value");
                    let mut gx = Tensor::zeros(yv.shape());
                    for r in 0..yv.rows() {
                        let yr = yv.row(r);
                        let gr = g.row(r);
                        let inner = dot(yr, gr);
                        for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - inner);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let lv = val(*logits);
                    let w = lv.cols();
                    let scale = g.data()[0] / targets.len() as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * w + t] -= 1.0;
                    }
                    for v in &mut gl {
                        *v *= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), gl)?);
                }
                Op::LayerNorm { x, inv_std } => {
                    let yv = node.value.as_ref().expect("layer norm value");
                    let n = yv.cols() as f64;
                    let mut gx = Tensor::zeros(yv.shape());
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let yr = yv.row(r);
                        let gr = g.row(r);
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gy = dot(gr, yr);
                        for ((o, &yi), &gi) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = inv * (gi - sum_g / n - yi * sum_gy / n);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Dropout(x, mask) => {
                    let gx = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect(),
                    )?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, Tensor::new(vec![rows, w], data)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let c = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let pv = val(p);
                        let r = pv.rows();
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        offset += r;
                        accumulate(&mut grads, p, Tensor::new(pv.shape().to_vec(), data)?);
                    }
                }
                Op::SliceCols(x, start) => {
                    let acc = slot(&mut grads, *x, val(*x).shape());
                    let c = acc.cols();
                    let w = g.cols();
                    for r in 0..g.rows() {
                        let dst = &mut acc.data_mut()[r * c + start..r * c + start + w];
                        dst.iter_mut().zip(g.row(r)).for_each(|(d, v)| *d += v);
                    }
                }
                Op::SliceRows(x, start) => {
                    let acc = slot(&mut grads, *x, val(*x).shape());
                    let c = acc.cols();
                    let dst = &mut acc.data_mut()[start * c..start * c + g.len()];
                    dst.iter_mut().zip(g.data()).for_each(|(d, v)| *d += v);
                }
                Op::Reshape(x) => {
                    let shape = val(*x).shape().to_vec();
                    accumulate(&mut grads, *x, g.reshape(shape)?);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// The gradient slot of `id`, zero-filled on first use, for ops that only
/// touch part of their input.
fn slot<'g>(grads: &'g mut [Option<Tensor>], id: usize, shape: &[usize]) -> &'g mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same length")
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x)) = min(x, 0) - ln(1 + exp(-|x|))`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

impl<'a> Var<'a> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'a Tape<'a> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.with_value(self.id, |v| v.shape().to_vec())
    }

    pub fn value(&self) -> Tensor {
        self.tape.with_value(self.id, |v| v.clone())
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> Result<f64> {
        self.tape.with_value(self.id, |v| v.item())
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'a>> {
        let value = self.tape.with_value(self.id, f)?;
        Ok(self.tape.push(Some(value), op))
    }

    fn binary(
        &self,
        other: &Var<'a>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'a>> {
        let value = self.tape.with_values(self.id, other.id, f)?;
        Ok(self.tape.push(Some(value), op))
    }

    fn elementwise(
        &self,
        other: &Var<'a>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'a>> {
        self.binary(other, op, |a, b| {
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            Ok(zip_map(a, b, f))
        })
    }

    pub fn add(&self, other: &Var<'a>) -> Result<Var<'a>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'a>) -> Result<Var<'a>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'a>) -> Result<Var<'a>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a vector to every row.
    pub fn add_row(&self, bias: &Var<'a>) -> Result<Var<'a>> {
        self.binary(bias, Op::AddRow(self.id, bias.id), |x, b| {
            if b.rank() != 1 || b.len() != x.cols() {
                return Err(Error::shape("add_row", x.shape(), b.shape()));
            }
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, bi) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bi;
                }
            }
            Ok(out)
        })
    }

    /// Multiplies every row elementwise by a vector.
    pub fn mul_row(&self, scale: &Var<'a>) -> Result<Var<'a>> {
        self.binary(scale, Op::MulRow(self.id, scale.id), |x, s| {
            if s.rank() != 1 || s.len() != x.cols() {
                return Err(Error::shape("mul_row", x.shape(), s.shape()));
            }
            let mut out = x.clone();
            for r in 0..out.rows() {
                for (o, si) in out.row_mut(r).iter_mut().zip(s.data()) {
                    *o *= si;
                }
            }
            Ok(out)
        })
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'a> {
        self.unary(Op::Affine(self.id, scale), |x| Ok(x.map(|v| scale * v + shift)))
            .expect("affine is total")
    }

    pub fn scale(&self, factor: f64) -> Var<'a> {
        self.affine(factor, 0.0)
    }

    pub fn matmul(&self, other: &Var<'a>) -> Result<Var<'a>> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| {
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul_into(a.data(), b.data(), m, k, n))
        })
    }

    pub fn transpose(&self) -> Result<Var<'a>> {
        self.unary(Op::Transpose(self.id), |x| {
            if x.rank() != 2 {
                return Err(Error::invalid("transpose", format!("needs a matrix, got {:?}", x.shape())));
            }
            let (r, c) = (x.shape()[0], x.shape()[1]);
            Tensor::new(vec![c, r], transpose(x.data(), r, c))
        })
    }

    /// Rows of a matrix selected by index (embedding lookup).
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'a>> {
        let idx = indices.to_vec();
        let value = self.tape.with_value(self.id, |t| {
            if t.rank() != 2 {
                return Err(Error::invalid("gather", format!("needs a matrix, got {:?}", t.shape())));
            }
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in &idx {
                if i >= t.rows() {
                    return Err(Error::invalid(
                        "gather",
                        format!("index {} out of range for {} rows", i, t.rows()),
                    ));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![idx.len(), c], data)
        })?;
        Ok(self.tape.push(Some(value), Op::Gather(self.id, idx)))
    }

    /// Norm of every row; the last dimension is reduced away.
    pub fn row_norm(&self, norm: Norm) -> Var<'a> {
        self.unary(Op::RowNorm(self.id, norm), |x| {
            let data = (0..x.rows())
                .map(|r| match norm {
                    Norm::L1 => x.row(r).iter().map(|v| v.abs()).sum(),
                    Norm::L2 => x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt(),
                })
                .collect();
            Tensor::new(reduced_shape(x.shape()), data)
        })
        .expect("row norm is total")
    }

    /// Sum of every row; the last dimension is reduced away.
    pub fn sum_rows(&self) -> Var<'a> {
        self.unary(Op::SumRows(self.id), |x| {
            let data = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
            Tensor::new(reduced_shape(x.shape()), data)
        })
        .expect("sum rows is total")
    }

    pub fn sum(&self) -> Var<'a> {
        self.unary(Op::Sum(self.id), |x| Ok(Tensor::scalar(x.data().iter().sum())))
            .expect("sum is total")
    }

    pub fn mean(&self) -> Result<Var<'a>> {
        self.unary(Op::Mean(self.id), |x| {
            if x.is_empty() {
                return Err(Error::invalid("mean", "empty tensor"));
            }
            Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64))
        })
    }

    pub fn sigmoid(&self) -> Var<'a> {
        self.unary(Op::Sigmoid(self.id), |x| Ok(x.map(sigmoid)))
            .expect("sigmoid is total")
    }

    pub fn log_sigmoid(&self) -> Var<'a> {
        self.unary(Op::LogSigmoid(self.id), |x| Ok(x.map(log_sigmoid)))
            .expect("log sigmoid is total")
    }

    pub fn gelu(&self) -> Var<'a> {
        self.unary(Op::Gelu(self.id), |x| Ok(x.map(gelu))).expect("gelu is total")
    }

    pub fn sin(&self) -> Var<'a> {
        self.unary(Op::Sin(self.id), |x| Ok(x.map(f64::sin))).expect("sin is total")
    }

    pub fn cos(&self) -> Var<'a> {
        self.unary(Op::Cos(self.id), |x| Ok(x.map(f64::cos))).expect("cos is total")
    }

    /// Row-wise softmax. Columns with `mask[c] == false` get probability
    /// exactly zero and receive no gradient.
    pub fn softmax(&self, mask: Option<&[bool]>) -> Result<Var<'a>> {
        self.unary(Op::Softmax(self.id), |x| {
            let c = x.cols();
            if let Some(m) = mask {
                if m.len() != c {
                    return Err(Error::shape("softmax", x.shape(), &[m.len()]));
                }
                if !m.iter().any(|&b| b) {
                    return Err(Error::invalid("softmax", "mask hides every column"));
                }
            }
            let keep = |j: usize| mask.is_none_or(|m| m[j]);
            let mut out = Tensor::zeros(x.shape());
            for r in 0..x.rows() {
                let xr = x.row(r);
                let max = (0..c)
                    .filter(|&j| keep(j))
                    .map(|j| xr[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let or = out.row_mut(r);
                let mut total = 0.0;
                for j in 0..c {
                    if keep(j) {
                        let e = (xr[j] - max).exp();
                        or[j] = e;
                        total += e;
                    }
                }
                for v in or.iter_mut() {
                    *v /= total;
                }
            }
            Ok(out)
        })
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'a>> {
        let (loss, probs) = self.tape.with_value(self.id, |x| {
            if x.rank() != 2 || x.rows() != targets.len() {
                return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
            }
            if targets.is_empty() {
                return Err(Error::invalid("cross_entropy", "no targets"));
            }
            let w = x.cols();
            let mut probs = vec![0.0; x.len()];
            let mut total = 0.0;
            for (r, &t) in targets.iter().enumerate() {
                if t >= w {
                    return Err(Error::invalid(
                        "cross_entropy",
                        format!("target {} out of range for {} classes", t, w),
                    ));
                }
                let xr = x.row(r);
                let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = xr.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                total += log_z - xr[t];
                for (p, v) in probs[r * w..(r + 1) * w].iter_mut().zip(xr) {
                    *p = (v - log_z).exp();
                }
            }
            Ok((total / targets.len() as f64, probs))
        })?;
        Ok(self.tape.push(
            Some(Tensor::scalar(loss)),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&self) -> Var<'a> {
        let (value, inv_std) = self.tape.with_value(self.id, |x| {
            let n = x.cols() as f64;
            let mut out = x.clone();
            let mut inv_std = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = out.row_mut(r);
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
                inv_std.push(inv);
            }
            (out, inv_std)
        });
        self.tape.push(
            Some(value),
            Op::LayerNorm {
                x: self.id,
                inv_std,
            },
        )
    }

    /// Inverted dropout. The identity outside training mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Var<'a> {
        if !self.tape.training || p <= 0.0 {
            return *self;
        }
        let keep = 1.0 - p;
        let n = self.tape.with_value(self.id, |x| x.len());
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let value = self.tape.with_value(self.id, |x| {
            Tensor::new(
                x.shape().to_vec(),
                x.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
            )
            .expect("same length")
        });
        self.tape.push(Some(value), Op::Dropout(self.id, mask))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'a>> {
        self.unary(Op::SliceCols(self.id, start), |x| {
            if x.rank() != 2 || start > end || end > x.cols() {
                return Err(Error::invalid(
                    "slice_cols",
                    format!("columns {}..{} of {:?}", start, end, x.shape()),
                ));
            }
            let w = end - start;
            let mut data = Vec::with_capacity(x.rows() * w);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[start..end]);
            }
            Tensor::new(vec![x.rows(), w], data)
        })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'a>> {
        self.unary(Op::SliceRows(self.id, start), |x| {
            if x.rank() != 2 || start > end || end > x.rows() {
                return Err(Error::invalid(
                    "slice_rows",
                    format!("rows {}..{} of {:?}", start, end, x.shape()),
                ));
            }
            let c = x.cols();
            Tensor::new(vec![end - start, c], x.data()[start * c..end * c].to_vec())
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'a>> {
        self.unary(Op::Reshape(self.id), |x| x.clone().reshape(shape.to_vec()))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'a>]) -> Result<Var<'a>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| tape.value_of(&nodes, p.id)).collect();
            let rows = vals[0].rows();
            for v in &vals {
                if v.rank() != 2 || v.rows() != rows {
                    return Err(Error::shape("concat_cols", vals[0].shape(), v.shape()));
                }
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &vals {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        Ok(tape.push(Some(value), Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(parts: &[Var<'a>]) -> Result<Var<'a>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let vals: Vec<&Tensor> = parts.iter().map(|p| tape.value_of(&nodes, p.id)).collect();
            let cols = vals[0].cols();
            let mut rows = 0;
            let mut data = Vec::new();
            for v in &vals {
                if v.rank() != 2 || v.cols() != cols {
                    return Err(Error::shape("concat_rows", vals[0].shape(), v.shape()));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::new(vec![rows, cols], data)?
        };
        Ok(tape.push(Some(value), Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.is_empty() {
        Vec::new()
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty() -> ParameterSet {
        ParameterSet::new()
    }

    #[test]
    fn matmul_shape() {
        let p = empty();
        let tape = Tape::new(&p);
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let b = tape.constant(Tensor::matrix(3, 2, vec![1.0; 6]).unwrap());
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 2]);
        assert_eq!(c.value().data(), &[3.0; 4]);
    }

    #[test]
    fn matmul_mismatch_names_primitive() {
        let p = empty();
        let tape = Tape::new(&p);
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let err = a.matmul(&a).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = empty();
        let tape = Tape::new(&p);
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(x.softmax(None).unwrap().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_zeroes_hidden_columns() {
        let p = empty();
        let tape = Tape::new(&p);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 100.0]));
        let y = x.softmax(Some(&[true, true, false])).unwrap().value();
        assert_eq!(y.data()[2], 0.0);
        assert!((y.data()[0] + y.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let p = empty();
        let tape = Tape::new(&p);
        let x = tape.constant(Tensor::vector(vec![3.0; 8]));
        assert!(x.layer_norm().value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sum_gives_ones() {
        let mut p = ParameterSet::new();
        let id = p.insert("p", Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let tape = Tape::new(&p);
        let loss = tape.param(id).sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn l1_norm_gradient_is_sign() {
        let mut p = ParameterSet::new();
        let id = p.insert("p", Tensor::vector(vec![2.0, -3.0, 0.0])).unwrap();
        let tape = Tape::new(&p);
        let loss = tape.param(id).row_norm(Norm::L1);
        assert_eq!(loss.item().unwrap(), 5.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut p = ParameterSet::new();
        let id = p.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let tape = Tape::new(&p);
        let v = tape.param(id);
        assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreached_parameter_has_no_gradient() {
        let mut p = ParameterSet::new();
        let a = p.insert("a", Tensor::vector(vec![1.0])).unwrap();
        let b = p.insert("b", Tensor::vector(vec![1.0])).unwrap();
        let tape = Tape::new(&p);
        let _unused = tape.param(b);
        let loss = tape.param(a).sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(b).is_none());
        assert!(!g.is_nonzero(b));
    }

    #[test]
    fn stable_log_sigmoid() {
        assert_eq!(log_sigmoid(0.0), -std::f64::consts::LN_2);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
        assert!(log_sigmoid(1000.0) <= 0.0);
    }

    #[test]
    fn dropout_is_identity_outside_training() {
        let p = empty();
        let tape = Tape::new(&p);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let mut rng = rand::rng();
        assert_eq!(x.dropout(0.5, &mut rng).id(), x.id());
    }
}
