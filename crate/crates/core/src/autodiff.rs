//! Define-by-run reverse-mode automatic differentiation over small dense
//! matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Values are
//! row-major [`Tensor`]s of rank at most two; a 1x1 tensor is a scalar and is
//! the only operand that broadcasts. A tape is single-threaded and owned by
//! one worker.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pbm::Numeric;

/// Floor applied before fractional powers in differentiable code.
pub const POW_FLOOR: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}, {:?})", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "tensor",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(1, 1, v)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn column(data: Vec<f64>) -> Self {
        Self {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Self {
            rows: rows.len(),
            cols: N,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn add_scaled_assign(&mut self, other: &Tensor, c: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    /// Plain matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    PowScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    ClampMin(usize, f64),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>, Axis),
    Slice {
        src: usize,
        axis: Axis,
        start: usize,
        end: usize,
    },
    Where {
        cond: Rc<Vec<bool>>,
        a: usize,
        b: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Tensor>>>,
    backward_calls: Cell<usize>,
}

impl Tape {
    pub fn new() -> Rc<Self> {
        Rc::new(Self::default())
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Backward-rule invocations performed by all `backward` calls so far.
    pub fn backward_invocations(&self) -> usize {
        self.backward_calls.get()
    }

    fn push(self: &Rc<Self>, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: Rc::clone(self),
            id,
        }
    }

    /// Trainable input.
    pub fn param(self: &Rc<Self>, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(self: &Rc<Self>, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(self: &Rc<Self>, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }
}

/// Differentiable value: a handle to one node of a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Rc<Tape>,
    id: usize,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    if a == b || b == (1, 1) {
        Ok(a)
    } else if a == (1, 1) {
        Ok(b)
    } else {
        Err(Error::Shape { op, lhs: a, rhs: b })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, shape: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n = shape.0 * shape.1;
    let data = match (a.is_scalar() && n != 1, b.is_scalar() && n != 1) {
        (false, false) => a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        (true, _) => {
            let x = a.data[0];
            b.data.iter().map(|&y| f(x, y)).collect()
        }
        (false, true) => {
            let y = b.data[0];
            a.data.iter().map(|&x| f(x, y)).collect()
        }
    };
    Tensor {
        rows: shape.0,
        cols: shape.1,
        data,
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.with_value(|v| v.shape())
    }

    /// Value of a 1x1 variable.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of the last backward passes, if any reached this
    /// node.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grads.borrow().get(self.id).cloned().flatten()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        let v = self.value();
        self.tape.constant(v)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.map(f), n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn binary(
        &self,
        other: &Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        debug_assert!(Rc::ptr_eq(&self.tape, &other.tape), "variables from different tapes");
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(name, a.value.shape(), b.value.shape())?;
            (
                zip_broadcast(&a.value, &b.value, shape, f),
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn try_add(&self, o: &Var) -> Result<Var> {
        self.binary(o, "add", |a, b| a + b, Op::Add(self.id, o.id))
    }

    pub fn try_sub(&self, o: &Var) -> Result<Var> {
        self.binary(o, "sub", |a, b| a - b, Op::Sub(self.id, o.id))
    }

    pub fn try_mul(&self, o: &Var) -> Result<Var> {
        self.binary(o, "mul", |a, b| a * b, Op::Mul(self.id, o.id))
    }

    pub fn try_div(&self, o: &Var) -> Result<Var> {
        self.binary(o, "div", |a, b| a / b, Op::Div(self.id, o.id))
    }

    pub fn try_matmul(&self, o: &Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[o.id]);
            (a.value.matmul(&b.value)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, o.id), rg))
    }

    pub fn matmul(&self, o: &Var) -> Var {
        self.try_matmul(o).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn neg(&self) -> Var {
        self.unary(|x| -x, Op::Neg(self.id))
    }

    /// `self * c` for a constant `c`.
    pub fn scale(&self, c: f64) -> Var {
        self.unary(|x| x * c, Op::Scale(self.id, c))
    }

    /// `self + c` for a constant `c`.
    pub fn offset(&self, c: f64) -> Var {
        self.unary(|x| x + c, Op::Offset(self.id))
    }

    /// `self^p` for a constant exponent. Non-integer exponents require a
    /// strictly positive base.
    pub fn powf(&self, p: f64) -> Var {
        self.unary(|x| x.powf(p), Op::PowScalar(self.id, p))
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, Op::Log(self.id))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn softplus(&self) -> Var {
        self.unary(softplus, Op::Softplus(self.id))
    }

    /// `max(self, floor)`; gradient passes only where the input is above
    /// the floor.
    pub fn clamp_min(&self, floor: f64) -> Var {
        self.unary(|x| x.max(floor), Op::ClampMin(self.id, floor))
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, Op::Square(self.id))
    }

    pub fn abs(&self) -> Var {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn sum(&self) -> Var {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (Tensor::scalar(n.value.sum()), n.requires_grad)
        };
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let len = n.value.len().max(1) as f64;
            (Tensor::scalar(n.value.sum() / len), n.requires_grad)
        };
        self.tape.push(value, Op::Mean(self.id), rg)
    }

    /// Rows `start..end` (axis `Rows`) or columns `start..end` (axis `Cols`).
    pub fn try_slice(&self, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            let src = &n.value;
            let limit = match axis {
                Axis::Rows => src.rows,
                Axis::Cols => src.cols,
            };
            if start >= end || end > limit {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: src.shape(),
                    rhs: (start, end),
                });
            }
            let value = match axis {
                Axis::Rows => Tensor {
                    rows: end - start,
                    cols: src.cols,
                    data: src.data[start * src.cols..end * src.cols].to_vec(),
                },
                Axis::Cols => {
                    let w = end - start;
                    let mut data = Vec::with_capacity(src.rows * w);
                    for r in 0..src.rows {
                        data.extend_from_slice(&src.data[r * src.cols + start..r * src.cols + end]);
                    }
                    Tensor {
                        rows: src.rows,
                        cols: w,
                        data,
                    }
                }
            };
            (value, n.requires_grad)
        };
        Ok(self.tape.push(
            value,
            Op::Slice {
                src: self.id,
                axis,
                start,
                end,
            },
            rg,
        ))
    }

    pub fn slice(&self, axis: Axis, start: usize, end: usize) -> Var {
        self.try_slice(axis, start, end).unwrap_or_else(|e| panic!("{e}"))
    }

    pub fn rows(&self, start: usize, end: usize) -> Var {
        self.slice(Axis::Rows, start, end)
    }

    pub fn cols(&self, start: usize, end: usize) -> Var {
        self.slice(Axis::Cols, start, end)
    }

    /// Elementwise selection: `cond[i] ? self[i] : other[i]`.
    pub fn try_select(&self, cond: Vec<bool>, other: &Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.value.shape() != b.value.shape() || cond.len() != a.value.len() {
                return Err(Error::Shape {
                    op: "where",
                    lhs: a.value.shape(),
                    rhs: b.value.shape(),
                });
            }
            let data = cond
                .iter()
                .zip(a.value.data.iter().zip(&b.value.data))
                .map(|(&c, (&x, &y))| if c { x } else { y })
                .collect();
            (
                Tensor {
                    rows: a.value.rows,
                    cols: a.value.cols,
                    data,
                },
                a.requires_grad || b.requires_grad,
            )
        };
        Ok(self.tape.push(
            value,
            Op::Where {
                cond: Rc::new(cond),
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Backward pass from a scalar root. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        let nodes = self.tape.nodes.borrow();
        let root = &nodes[self.id];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut scratch: Vec<Option<Tensor>> = vec![None; self.id + 1];
        scratch[self.id] = Some(Tensor::scalar(1.0));
        let mut calls = 0;

        for id in (0..=self.id).rev() {
            let Some(g) = scratch[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                scratch[id] = Some(g);
                continue;
            }
            calls += 1;
            backward_rule(&nodes, node, &g, &mut scratch);
        }
        self.tape.backward_calls.set(self.tape.backward_calls.get() + calls);

        let mut grads = self.tape.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize(nodes.len(), None);
        }
        for (id, g) in scratch.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn accumulate(scratch: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    let target = nodes[id].value.shape();
    // Reduce broadcast scalars.
    let g = if target == (1, 1) && g.shape() != (1, 1) {
        Tensor::scalar(g.sum())
    } else {
        g
    };
    match &mut scratch[id] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn accumulate_with(
    scratch: &mut [Option<Tensor>],
    nodes: &[Node],
    id: usize,
    shape: (usize, usize),
    f: impl FnOnce(&mut Tensor),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = &mut scratch[id];
    let acc = slot.get_or_insert_with(|| Tensor::zeros(shape.0, shape.1));
    f(acc);
}

/// `g * factor(x, y)` elementwise with broadcasting of the scalar side.
fn elementwise_grad(g: &Tensor, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let n = g.len();
    let ai = |i: usize| if a.len() == 1 { a.data[0] } else { a.data[i] };
    let bi = |i: usize| if b.len() == 1 { b.data[0] } else { b.data[i] };
    Tensor {
        rows: g.rows,
        cols: g.cols,
        data: (0..n).map(|i| f(g.data[i], ai(i), bi(i))).collect(),
    }
}

fn backward_rule(nodes: &[Node], node: &Node, g: &Tensor, scratch: &mut [Option<Tensor>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(scratch, nodes, *a, g.clone());
            accumulate(scratch, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(scratch, nodes, *a, g.clone());
            accumulate(scratch, nodes, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                accumulate(scratch, nodes, *a, elementwise_grad(g, va, vb, |g, _, y| g * y));
            }
            if nodes[*b].requires_grad {
                accumulate(scratch, nodes, *b, elementwise_grad(g, va, vb, |g, x, _| g * x));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if nodes[*a].requires_grad {
                accumulate(scratch, nodes, *a, elementwise_grad(g, va, vb, |g, _, y| g / y));
            }
            if nodes[*b].requires_grad {
                accumulate(
                    scratch,
                    nodes,
                    *b,
                    elementwise_grad(g, va, vb, |g, x, y| -g * x / (y * y)),
                );
            }
        }
        Op::Neg(a) => accumulate(scratch, nodes, *a, g.map(|v| -v)),
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(scratch, nodes, *a, g.map(|v| v * c));
        }
        Op::Offset(a) => accumulate(scratch, nodes, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            // dA = G B^T
            accumulate_with(scratch, nodes, *a, va.shape(), |acc| {
                let (m, k, n) = (va.rows, va.cols, vb.cols);
                for i in 0..m {
                    let g_row = &g.data[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let b_row = &vb.data[kk * n..(kk + 1) * n];
                        let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        acc.data[i * k + kk] += dot;
                    }
                }
            });
            // dB = A^T G
            accumulate_with(scratch, nodes, *b, vb.shape(), |acc| {
                let (m, k, n) = (va.rows, va.cols, vb.cols);
                for i in 0..m {
                    let g_row = &g.data[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = va.data[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let acc_row = &mut acc.data[kk * n..(kk + 1) * n];
                        for (o, gv) in acc_row.iter_mut().zip(g_row) {
                            *o += aik * gv;
                        }
                    }
                }
            });
        }
        Op::PowScalar(a, p) => {
            let p = *p;
            let va = &nodes[*a].value;
            accumulate(
                scratch,
                nodes,
                *a,
                elementwise_grad(g, va, va, |g, x, _| g * p * x.powf(p - 1.0)),
            );
        }
        Op::Exp(a) => accumulate(scratch, nodes, *a, elementwise_grad(g, out, out, |g, y, _| g * y)),
        Op::Log(a) => {
            let va = &nodes[*a].value;
            accumulate(scratch, nodes, *a, elementwise_grad(g, va, va, |g, x, _| g / x));
        }
        Op::Tanh(a) => accumulate(
            scratch,
            nodes,
            *a,
            elementwise_grad(g, out, out, |g, y, _| g * (1.0 - y * y)),
        ),
        Op::Sigmoid(a) => accumulate(
            scratch,
            nodes,
            *a,
            elementwise_grad(g, out, out, |g, y, _| g * y * (1.0 - y)),
        ),
        Op::Softplus(a) => {
            let va = &nodes[*a].value;
            accumulate(
                scratch,
                nodes,
                *a,
                elementwise_grad(g, va, va, |g, x, _| g * sigmoid(x)),
            );
        }
        Op::ClampMin(a, floor) => {
            let floor = *floor;
            let va = &nodes[*a].value;
            accumulate(
                scratch,
                nodes,
                *a,
                elementwise_grad(g, va, va, |g, x, _| if x > floor { g } else { 0.0 }),
            );
        }
        Op::Square(a) => {
            let va = &nodes[*a].value;
            accumulate(scratch, nodes, *a, elementwise_grad(g, va, va, |g, x, _| 2.0 * g * x));
        }
        Op::Abs(a) => {
            let va = &nodes[*a].value;
            accumulate(
                scratch,
                nodes,
                *a,
                elementwise_grad(g, va, va, |g, x, _| g * x.signum() * (x != 0.0) as u8 as f64),
            );
        }
        Op::Sum(a) => {
            let (r, c) = nodes[*a].value.shape();
            accumulate(scratch, nodes, *a, Tensor::full(r, c, g.data[0]));
        }
        Op::Mean(a) => {
            let (r, c) = nodes[*a].value.shape();
            let n = (r * c).max(1) as f64;
            accumulate(scratch, nodes, *a, Tensor::full(r, c, g.data[0] / n));
        }
        Op::Concat(parts, axis) => {
            let mut offset = 0;
            for &p in parts {
                let (pr, pc) = nodes[p].value.shape();
                if nodes[p].requires_grad {
                    accumulate_with(scratch, nodes, p, (pr, pc), |acc| match axis {
                        Axis::Rows => {
                            let start = offset * g.cols;
                            acc.add_assign(&Tensor {
                                rows: pr,
                                cols: pc,
                                data: g.data[start..start + pr * pc].to_vec(),
                            });
                        }
                        Axis::Cols => {
                            for r in 0..pr {
                                let src = &g.data[r * g.cols + offset..r * g.cols + offset + pc];
                                for (o, v) in acc.data[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                    });
                }
                offset += match axis {
                    Axis::Rows => pr,
                    Axis::Cols => pc,
                };
            }
        }
        Op::Slice {
            src,
            axis,
            start,
            end,
        } => {
            let shape = nodes[*src].value.shape();
            let (start, end) = (*start, *end);
            accumulate_with(scratch, nodes, *src, shape, |acc| match axis {
                Axis::Rows => {
                    let cols = acc.cols;
                    for (o, v) in acc.data[start * cols..end * cols].iter_mut().zip(&g.data) {
                        *o += v;
                    }
                }
                Axis::Cols => {
                    let w = end - start;
                    let cols = acc.cols;
                    for r in 0..acc.rows {
                        for (o, v) in acc.data[r * cols + start..r * cols + end]
                            .iter_mut()
                            .zip(&g.data[r * w..(r + 1) * w])
                        {
                            *o += v;
                        }
                    }
                }
            });
        }
        Op::Where { cond, a, b } => {
            let ga = Tensor {
                rows: g.rows,
                cols: g.cols,
                data: g.data.iter().zip(cond.iter()).map(|(&v, &c)| if c { v } else { 0.0 }).collect(),
            };
            let gb = Tensor {
                rows: g.rows,
                cols: g.cols,
                data: g.data.iter().zip(cond.iter()).map(|(&v, &c)| if c { 0.0 } else { v }).collect(),
            };
            accumulate(scratch, nodes, *a, ga);
            accumulate(scratch, nodes, *b, gb);
        }
    }
}

/// Concatenates variables along an axis.
pub fn try_concat(parts: &[Var], axis: Axis) -> Result<Var> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let tape = Rc::clone(&first.tape);
    let (value, rg) = {
        let nodes = tape.nodes.borrow();
        let shapes: Vec<_> = parts.iter().map(|p| nodes[p.id].value.shape()).collect();
        let (r0, c0) = shapes[0];
        for &s in &shapes[1..] {
            let ok = match axis {
                Axis::Rows => s.1 == c0,
                Axis::Cols => s.0 == r0,
            };
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: (r0, c0),
                    rhs: s,
                });
            }
        }
        let value = match axis {
            Axis::Rows => {
                let rows = shapes.iter().map(|s| s.0).sum();
                let mut data = Vec::with_capacity(rows * c0);
                for p in parts {
                    data.extend_from_slice(&nodes[p.id].value.data);
                }
                Tensor { rows, cols: c0, data }
            }
            Axis::Cols => {
                let cols: usize = shapes.iter().map(|s| s.1).sum();
                let mut data = Vec::with_capacity(r0 * cols);
                for r in 0..r0 {
                    for p in parts {
                        data.extend_from_slice(nodes[p.id].value.row_slice(r));
                    }
                }
                Tensor { rows: r0, cols, data }
            }
        };
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        (value, rg)
    };
    Ok(tape.push(value, Op::Concat(parts.iter().map(|p| p.id).collect(), axis), rg))
}

pub fn concat(parts: &[Var], axis: Axis) -> Var {
    try_concat(parts, axis).unwrap_or_else(|e| panic!("{e}"))
}

/// Elementwise `cond ? a : b`.
pub fn select(cond: Vec<bool>, a: &Var, b: &Var) -> Var {
    a.try_select(cond, b).unwrap_or_else(|e| panic!("{e}"))
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $try:ident) => {
        impl $trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                self.$try(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
        impl $trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                (&self).$try(&rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
        impl $trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                (&self).$try(rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
        impl $trait<Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                self.$try(&rhs).unwrap_or_else(|e| panic!("{e}"))
            }
        }
    };
}

impl_binop!(Add, add, try_add);
impl_binop!(Sub, sub, try_sub);
impl_binop!(Mul, mul, try_mul);
impl_binop!(Div, div, try_div);

impl Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(&self)
    }
}

impl Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

impl Numeric for Var {
    fn exp(&self) -> Self {
        Var::exp(self)
    }

    fn scale(&self, c: f64) -> Self {
        Var::scale(self, c)
    }

    fn offset(&self, c: f64) -> Self {
        Var::offset(self, c)
    }

    fn positive_part(&self) -> Self {
        self.clamp_min(0.0)
    }

    /// `base^e = exp(e ln base)` with the logarithm taken of the base floored
    /// at `POW_FLOOR`; entries with a zero base give exactly zero.
    fn pow(&self, exponent: &Self) -> Self {
        let positive: Vec<bool> = self.with_value(|t| t.data().iter().map(|v| *v > 0.0).collect());
        let powered = (exponent * &self.clamp_min(POW_FLOOR).ln()).exp();
        if positive.iter().all(|p| *p) {
            return powered;
        }
        let zeros = self.tape.constant(Tensor::zeros(powered.shape().0, powered.shape().1));
        select(positive, &powered, &zeros)
    }
}

/// Largest component-wise relative disagreement between the reverse-mode
/// gradient of `f` at `x` and central finite differences with step `eps`:
/// `max |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&xv)?;
    y.backward()?;
    let g_ad = xv.grad().unwrap_or_else(|| Tensor::zeros(x.rows, x.cols));

    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t);
        let y = f(&v)?;
        Ok(y.item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let g_fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let ga = g_ad.data[i];
        let rel = (ga - g_fd).abs() / (ga.abs() + g_fd.abs() + 1e-12);
        if !rel.is_finite() {
            return Err(Error::Numeric(format!("gradcheck component {i}: {ga} vs {g_fd}")));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

impl Tensor {
    /// `self += c * other`, used by optimizers.
    pub fn axpy(&mut self, c: f64, other: &Tensor) {
        self.add_scaled_assign(other, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softplus_and_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.softplus();
        assert_relative_eq!(y.item(), 2f64.ln(), epsilon = 1e-15);
        y.backward().unwrap();
        assert_relative_eq!(x.grad().unwrap().item(), 0.5, epsilon = 1e-15);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = x.sigmoid();
        assert_eq!(y.item(), 0.5);
        y.backward().unwrap();
        assert_relative_eq!(x.grad().unwrap().item(), 0.25, epsilon = 1e-15);
    }

    #[test]
    fn matmul_shapes() {
        let tape = Tape::new();
        let a = tape.param(Tensor::full(2, 3, 0.5));
        let b = tape.param(Tensor::full(3, 4, 2.0));
        let c = a.matmul(&b);
        assert_eq!(c.shape(), (2, 4));
        c.sum().backward().unwrap();
        assert_eq!(a.grad().unwrap().shape(), (2, 3));
        assert_eq!(b.grad().unwrap().shape(), (3, 4));
        // d sum(AB)/dA_ik = sum_j B_kj
        assert!(a.grad().unwrap().data().iter().all(|&g| g == 8.0));
        assert!(b.grad().unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(2, 3, vec![1., -2., 3., 4., 5., 6.]).unwrap());
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), Tensor::full(2, 3, 1.0));
    }

    #[test]
    fn mean_of_squares() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        x.square().mean().backward().unwrap();
        let g = x.grad().unwrap();
        let expected = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in g.data().iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn reused_value_accumulates_both_paths() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = &x * &x;
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 6.0);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.square().scale(0.5);
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 4.0);
        tape.zero_grad();
        assert!(x.grad().is_none());
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(x.exp().backward(), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_error_names_op() {
        let tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 3));
        let b = tape.param(Tensor::zeros(3, 2));
        match a.try_add(&b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("unexpected {other:?}"),
        }
        match a.try_matmul(&a) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detached_values_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let d = x.detach();
        let y = &(&x * &d) + &d.exp();
        y.backward().unwrap();
        // only the direct path through x contributes: d(x * c)/dx = c
        assert_eq!(x.grad().unwrap().item(), 1.5);
        assert!(d.grad().is_none());
        assert!(!d.requires_grad());
    }

    #[test]
    fn constants_record_no_backward_rule() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let y = c.exp().square();
        assert!(!y.requires_grad());
        let x = tape.param(Tensor::scalar(1.0));
        let z = (&y * &x).sum();
        z.backward().unwrap();
        // nodes: c, exp, square, x, mul, sum -> only mul and sum need rules
        assert_eq!(tape.backward_invocations(), 2);
    }

    #[test]
    fn backward_visits_each_reachable_node_once() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(vec![0.3, -0.2]));
        let a = x.tanh();
        let b = &a * &a;
        let c = &b + &a;
        let d = c.sum();
        d.backward().unwrap();
        // tanh, mul, add, sum
        assert_eq!(tape.backward_invocations(), 4);
    }

    #[test]
    fn concat_and_slice_route_gradients() {
        let tape = Tape::new();
        let a = tape.param(Tensor::row(vec![1.0, 2.0]));
        let b = tape.param(Tensor::row(vec![3.0]));
        let c = concat(&[a.clone(), b.clone()], Axis::Cols);
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0]);
        let s = c.cols(1, 3);
        s.square().sum().backward().unwrap();
        assert_eq!(a.grad().unwrap().data(), &[0.0, 4.0]);
        assert_eq!(b.grad().unwrap().data(), &[6.0]);

        let tape = Tape::new();
        let r1 = tape.param(Tensor::row(vec![1.0, 2.0]));
        let r2 = tape.param(Tensor::row(vec![3.0, 4.0]));
        let m = concat(&[r1.clone(), r2.clone()], Axis::Rows);
        assert_eq!(m.shape(), (2, 2));
        m.rows(1, 2).sum().backward().unwrap();
        assert_eq!(r1.grad().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(r2.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let tape = Tape::new();
        let s = tape.param(Tensor::scalar(2.0));
        let v = tape.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let y = (&s * &v).sum();
        y.backward().unwrap();
        assert_eq!(s.grad().unwrap().item(), 6.0);
        assert_eq!(v.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn gradcheck_square() {
        let err = gradcheck(|x| Ok(x.square().sum()), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn where_selects_branch_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::row(vec![-1.0, 2.0]));
        let y = select(vec![true, false], &x.square(), &x.scale(3.0));
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[-2.0, 3.0]);
    }
}
