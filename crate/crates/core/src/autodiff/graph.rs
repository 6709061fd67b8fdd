//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::Real;
use crate::error::{Error, Result};
use crate::tensor::{matmul_dims, matmul_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Softplus,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Unary(UnaryOp, Var),
    /// Second operand's shape is a trailing suffix of the first's.
    Binary(BinaryOp, Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<[Option<usize>]>),
    /// Row selection from a tensor viewed as `[rows, width]`.
    GatherRows(Var, Arc<[usize]>, usize),
    Reduce(ReduceOp, Var, Option<usize>),
    LogSoftmax(Var),
}

impl Op {
    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Constant | Op::Param => [None, None],
            Op::Unary(_, a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::GatherRows(a, _, _)
            | Op::Reduce(_, a, _)
            | Op::LogSoftmax(a) => [Some(a), None],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => [Some(a), Some(b)],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A recording of primitive ops over tensors of scalar type `T`.
pub struct Graph<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node of a graph.
pub struct Gradients<T: Real = f64> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; exactly zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn split_axis(shape: &[usize], axis: Option<usize>) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        None => Ok((1, shape.iter().product(), 1, vec![])),
        Some(ax) => {
            if ax >= shape.len() {
                return Err(Error::Axis {
                    axis: ax,
                    rank: shape.len(),
                });
            }
            let outer = shape[..ax].iter().product();
            let inner = shape[ax + 1..].iter().product();
            let mut out = shape.to_vec();
            out.remove(ax);
            Ok((outer, shape[ax], inner, out))
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            Op::Constant => false,
            ref o => o
                .inputs()
                .iter()
                .flatten()
                .any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Param)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Constant lifted from an `f64` tensor.
    pub fn constant_f64(&mut self, value: &Tensor) -> Var {
        let data = value.data().iter().map(|&v| T::from_f64(v)).collect();
        let t = Tensor::new(value.shape().to_vec(), data).expect("same shape");
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Name of the first non-twice-differentiable op on the tape, if any.
    pub fn first_nonsmooth(&self) -> Option<&'static str> {
        self.nodes.iter().find_map(|n| match n.op {
            Op::Unary(UnaryOp::Relu, _) => Some("relu"),
            _ => None,
        })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        if op == UnaryOp::Log {
            if let Some(bad) = x.data().iter().find(|v| v.value() <= 0.0) {
                return Err(Error::LogDomain(bad.value()));
            }
        }
        let f: fn(T) -> T = match op {
            UnaryOp::Tanh => T::tanh,
            UnaryOp::Softplus => T::softplus,
            UnaryOp::Sigmoid => T::sigmoid,
            UnaryOp::Relu => |v| if v.value() > 0.0 { v } else { T::zero() },
            UnaryOp::Exp => T::exp,
            UnaryOp::Log => T::ln,
            UnaryOp::Square => |v| v * v,
            UnaryOp::Sqrt => T::sqrt,
        };
        let out = x.map(f);
        Ok(self.push(out, Op::Unary(op, a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a).expect("infallible")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a).expect("infallible")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, a).expect("infallible")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a).expect("infallible")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a).expect("infallible")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a).expect("infallible")
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Sqrt, a).expect("infallible")
    }

    /// Binary op with broadcasting of `b` when its shape is a trailing
    /// suffix of `a`'s (e.g. a bias vector across rows).
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let sa = xa.shape();
        let sb = xb.shape();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("elementwise", sa, sb));
        }
        let nb = xb.len();
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
        };
        let bd = xb.data();
        let mut data = Vec::with_capacity(xa.len());
        for chunk in xa.data().chunks(nb.max(1)) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, Op::Binary(op, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let ct = T::from_f64(c);
        let out = self.value(a).map(|v| v * ct);
        self.push(out, Op::MulScalar(a, c))
    }

    // ---- linear algebra and indexing ------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(xa.shape(), xb.shape())?;
        let mut out = vec![T::zero(); m * n];
        matmul_into(xa.data(), xb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(shape_err("transpose", x.shape(), &[]));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// `out[i] = a[index[i]]`, or zero where the index is `None`
    /// (used for padding in im2col).
    pub fn gather(&mut self, a: Var, index: Arc<[Option<usize>]>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err("gather", &[index.len()], shape));
        }
        if let Some(&Some(bad)) = index.iter().find(|i| matches!(i, Some(j) if *j >= x.len())) {
            return Err(shape_err("gather", x.shape(), &[bad]));
        }
        let data = index
            .iter()
            .map(|i| i.map_or(T::zero(), |j| x.data()[j]))
            .collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::Gather(a, index)))
    }

    /// Select rows of a tensor viewed as `[rows, rest...]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(shape_err("gather_rows", &shape, &[]));
        }
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(shape_err("gather_rows", &shape, &[bad]));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::GatherRows(a, rows.into(), width)))
    }

    /// Select a contiguous column range of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start > end || end > shape[1] {
            return Err(shape_err("slice_cols", &shape, &[start, end]));
        }
        let (r, c) = (shape[0], shape[1]);
        let index: Arc<[Option<usize>]> = (0..r)
            .flat_map(|i| (start..end).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(a, index, &[r, end - start])
    }

    // ---- reductions -----------------------------------------------------

    /// Reduce over `axis`, or over every element when `axis` is `None`.
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axis: Option<usize>) -> Result<Var> {
        let x = self.value(a);
        let (outer, n, inner, out_shape) = split_axis(x.shape(), axis)?;
        if n == 0 {
            return Err(Error::EmptyReduction);
        }
        let d = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| d[(o * n + j) * inner + i];
                let v = match op {
                    ReduceOp::Sum | ReduceOp::Mean => {
                        let mut s = T::zero();
                        for j in 0..n {
                            s += at(j);
                        }
                        if op == ReduceOp::Mean {
                            s / T::from_f64(n as f64)
                        } else {
                            s
                        }
                    }
                    ReduceOp::LogSumExp => {
                        let mut m = at(0);
                        for j in 1..n {
                            if at(j).value() > m.value() {
                                m = at(j);
                            }
                        }
                        if !m.value().is_finite() {
                            m
                        } else {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += (at(j) - m).exp();
                            }
                            m + s.ln()
                        }
                    }
                };
                out[o * inner + i] = v;
            }
        }
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::Reduce(op, a, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Sum, a, None).expect("non-empty")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.reduce(ReduceOp::Mean, a, None).expect("non-empty")
    }

    /// `x - logsumexp(x)` along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = *x.shape().last().ok_or(Error::EmptyReduction)?;
        if c == 0 {
            return Err(Error::EmptyReduction);
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(c) {
            let mut m = row[0];
            for &v in &row[1..] {
                if v.value() > m.value() {
                    m = v;
                }
            }
            let mut s = T::zero();
            for &v in row {
                s += (v - m).exp();
            }
            let lse = m + s.ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(out, Op::LogSoftmax(a)))
    }

    // ---- backward -------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let mut accum = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot =
                grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };

        match node.op {
            Op::Constant | Op::Param => {}
            Op::Unary(op, a) => {
                let x = self.nodes[a.0].value.data();
                let d: fn(T, T) -> T = match op {
                    UnaryOp::Tanh => |_, y| T::one() - y * y,
                    UnaryOp::Softplus => |x, _| x.sigmoid(),
                    UnaryOp::Sigmoid => |_, y| y * (T::one() - y),
                    UnaryOp::Relu => |x, _| if x.value() > 0.0 { T::one() } else { T::zero() },
                    UnaryOp::Exp => |_, y| y,
                    UnaryOp::Log => |x, _| T::one() / x,
                    UnaryOp::Square => |x, _| T::from_f64(2.0) * x,
                    UnaryOp::Sqrt => |_, y| T::one() / (T::from_f64(2.0) * y),
                };
                accum(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * d(x[i], y[i]);
                    }
                });
            }
            Op::Binary(op, a, b) => {
                let xa = self.nodes[a.0].value.data();
                let xb = self.nodes[b.0].value.data();
                let nb = xb.len().max(1);
                let da: fn(T, T, T) -> T = match op {
                    BinaryOp::Add | BinaryOp::Sub => |g, _, _| g,
                    BinaryOp::Mul => |g, _, b| g * b,
                    BinaryOp::Div => |g, _, b| g / b,
                };
                let db: fn(T, T, T) -> T = match op {
                    BinaryOp::Add => |g, _, _| g,
                    BinaryOp::Sub => |g, _, _| -g,
                    BinaryOp::Mul => |g, a, _| g * a,
                    BinaryOp::Div => |g, a, b| -g * a / (b * b),
                };
                accum(a, &mut |ga| {
                    for ((gac, gc), ac) in ga.chunks_mut(nb).zip(g.chunks(nb)).zip(xa.chunks(nb)) {
                        for j in 0..gac.len() {
                            gac[j] += da(gc[j], ac[j], xb[j]);
                        }
                    }
                });
                accum(b, &mut |gb| {
                    for (gc, ac) in g.chunks(nb).zip(xa.chunks(nb)) {
                        for j in 0..gc.len() {
                            gb[j] += db(gc[j], ac[j], xb[j]);
                        }
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => accum(a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i];
                }
            }),
            Op::MulScalar(a, c) => {
                let c = T::from_f64(c);
                accum(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * c;
                    }
                })
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let (da, db) = (va.data(), vb.data());
                // dA = G·Bᵀ
                accum(a, &mut |ga| {
                    for (grow, garow) in g.chunks(n.max(1)).zip(ga.chunks_mut(k.max(1))).take(m) {
                        for (gap, brow) in garow.iter_mut().zip(db.chunks(n.max(1))) {
                            let mut s = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                s += x * y;
                            }
                            *gap += s;
                        }
                    }
                });
                // dB = Aᵀ·G
                accum(b, &mut |gb| {
                    for (arow, grow) in da.chunks(k.max(1)).zip(g.chunks(n.max(1))).take(m) {
                        for (&av, gbrow) in arow.iter().zip(gb.chunks_mut(n.max(1))) {
                            for (d, &x) in gbrow.iter_mut().zip(grow) {
                                *d += av * x;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (r, c) = (s[0], s[1]);
                accum(a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Gather(a, ref index) => accum(a, &mut |ga| {
                for (i, ix) in index.iter().enumerate() {
                    if let Some(j) = *ix {
                        ga[j] += g[i];
                    }
                }
            }),
            Op::GatherRows(a, ref rows, width) => accum(a, &mut |ga| {
                for (gi, &r) in g.chunks(width.max(1)).zip(rows.iter()) {
                    for (d, &v) in ga[r * width..(r + 1) * width].iter_mut().zip(gi) {
                        *d += v;
                    }
                }
            }),
            Op::Reduce(op, a, axis) => {
                let x = &self.nodes[a.0].value;
                let (outer, n, inner, _) = split_axis(x.shape(), axis).expect("validated");
                let xd = x.data();
                let scale = T::from_f64(1.0 / n as f64);
                accum(a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let gi = g[o * inner + i];
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                ga[at] += match op {
                                    ReduceOp::Sum => gi,
                                    ReduceOp::Mean => gi * scale,
                                    ReduceOp::LogSumExp => gi * (xd[at] - y[o * inner + i]).exp(),
                                };
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = *node.value.shape().last().expect("rank >= 1");
                accum(a, &mut |ga| {
                    for (r, yrow) in y.chunks(c).enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        let mut gs = T::zero();
                        for &v in grow {
                            gs += v;
                        }
                        for j in 0..c {
                            ga[r * c + j] += grow[j] - yrow[j].exp() * gs;
                        }
                    }
                });
            }
        }
    }
}
