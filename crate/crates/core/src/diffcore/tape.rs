//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Every operation appends one node holding its value. Nodes can only refer to
//! earlier nodes, so the tape order is a topological order and the backward
//! sweep is a single reverse pass.
//!
//! Element-wise functions carry a derivative order. A node of order 1 holds
//! `f'(x)` and is itself differentiable (its backward uses `f''`), which is
//! enough to train losses that contain input gradients of a network.

use super::mat::{gemm, Mat};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise scalar functions with derivatives up to second order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    /// `x * sigmoid(x)`, also known as silu.
    Swish,
    Softplus,
    Exp,
    Log,
    Square,
    Recip,
    Sin,
    Cos,
    /// `min(x, 0)^2`, continuously differentiable at 0.
    HingeSq,
    /// Maps an angle to `[-pi, pi)`; derivative 1 almost everywhere.
    WrapAngle,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn wrap_angle(x: f64) -> f64 {
    use std::f64::consts::PI;
    x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor()
}

impl Unary {
    /// Value (`order == 0`) or derivative of the given order at `x`.
    pub fn eval(self, order: u8, x: f64) -> f64 {
        match (self, order) {
            (Unary::Tanh, 0) => x.tanh(),
            (Unary::Tanh, 1) => {
                let t = x.tanh();
                1.0 - t * t
            }
            (Unary::Tanh, 2) => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            (Unary::Sigmoid, 0) => sigmoid(x),
            (Unary::Sigmoid, 1) => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            (Unary::Sigmoid, 2) => {
                let s = sigmoid(x);
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
            (Unary::Swish, 0) => x * sigmoid(x),
            (Unary::Swish, 1) => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            (Unary::Swish, 2) => {
                let s = sigmoid(x);
                s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))
            }
            (Unary::Softplus, 0) => softplus(x),
            (Unary::Softplus, 1) => sigmoid(x),
            (Unary::Softplus, 2) => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            (Unary::Exp, _) => x.exp(),
            (Unary::Log, 0) => x.ln(),
            (Unary::Log, 1) => 1.0 / x,
            (Unary::Log, 2) => -1.0 / (x * x),
            (Unary::Square, 0) => x * x,
            (Unary::Square, 1) => 2.0 * x,
            (Unary::Square, 2) => 2.0,
            (Unary::Recip, 0) => 1.0 / x,
            (Unary::Recip, 1) => -1.0 / (x * x),
            (Unary::Recip, 2) => 2.0 / (x * x * x),
            (Unary::Sin, 0) => x.sin(),
            (Unary::Sin, 1) => x.cos(),
            (Unary::Sin, 2) => -x.sin(),
            (Unary::Cos, 0) => x.cos(),
            (Unary::Cos, 1) => -x.sin(),
            (Unary::Cos, 2) => -x.cos(),
            (Unary::HingeSq, 0) => {
                let m = x.min(0.0);
                m * m
            }
            (Unary::HingeSq, 1) => 2.0 * x.min(0.0),
            (Unary::HingeSq, 2) => {
                if x < 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
            (Unary::WrapAngle, 0) => wrap_angle(x),
            (Unary::WrapAngle, 1) => 1.0,
            (Unary::WrapAngle, 2) => 0.0,
            (_, o) => panic!("derivative order {o} not available for {self:?}"),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Unary(Unary, u8, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    RowNorm(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward evaluation.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    adj: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, zeros when `v` does not influence the output.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Mat {
        match self.get(v) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = tape.shape(v);
                Mat::zeros(r, c)
            }
        }
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

#[inline]
fn bidx(m: &Mat, i: usize, j: usize) -> usize {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    r * m.cols() + c
}

/// Sums `g` (output shaped) down to `shape` along broadcast dimensions.
fn reduce_to(g: &Mat, shape: (usize, usize)) -> Mat {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Mat::zeros(shape.0, shape.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let k = bidx(&out, i, j);
            out.as_mut_slice()[k] += g.get(i, j);
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that gradients are not propagated into.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let rows = broadcast_dim(va.rows(), vb.rows());
        let cols = broadcast_dim(va.cols(), vb.cols());
        let (Some(rows), Some(cols)) = (rows, cols) else {
            panic!("incompatible shapes {:?} and {:?}", va.shape(), vb.shape());
        };
        let out = if va.shape() == vb.shape() {
            let data = va.as_slice().iter().zip(vb.as_slice()).map(|(&x, &y)| f(x, y)).collect();
            Mat::from_vec(rows, cols, data).expect("shape")
        } else {
            let mut out = Mat::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let x = va.as_slice()[bidx(va, i, j)];
                    let y = vb.as_slice()[bidx(vb, i, j)];
                    out.set(i, j, f(x, y));
                }
            }
            out
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn unary(&mut self, f: Unary, x: Var) -> Var {
        self.unary_deriv(f, 0, x)
    }

    /// Derivative of `f` of the given order, evaluated element-wise.
    pub fn unary_deriv(&mut self, f: Unary, order: u8, x: Var) -> Var {
        assert!(order <= 1, "only first derivatives can be recorded");
        let out = self.nodes[x.0].value.map(|v| f.eval(order, v));
        let rg = self.rg(x);
        self.push(out, Op::Unary(f, order, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v * k);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        let out = self.nodes[x.0].value.map(|v| v + k);
        let rg = self.rg(x);
        self.push(out, Op::Offset(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            va.cols(),
            vb.rows(),
            "matmul of {:?} by {:?}",
            va.shape(),
            vb.shape()
        );
        let out = va.matmul(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.transpose();
        let rg = self.rg(x);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Var {
        let v = &self.nodes[x.0].value;
        let mut out = Mat::zeros(v.rows(), cols.len());
        for i in 0..v.rows() {
            for (j, &c) in cols.iter().enumerate() {
                assert!(c < v.cols(), "column {c} out of range for {:?}", v.shape());
                out.set(i, j, v.get(i, c));
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SelectCols(x, cols.to_vec()), rg)
    }

    pub fn col(&mut self, x: Var, c: usize) -> Var {
        self.select_cols(x, &[c])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.rows(), rows, "concat rows differ");
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.as_slice().iter().sum();
        let rg = self.rg(x);
        self.push(Mat::scalar(s), Op::SumAll(x), rg)
    }

    /// Per-row sums, giving a column.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        let out = Mat::from_vec(v.rows(), 1, data).expect("shape");
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    /// Per-column sums, giving a row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let mut out = Mat::zeros(1, v.cols());
        for i in 0..v.rows() {
            for (o, a) in out.as_mut_slice().iter_mut().zip(v.row(i)) {
                *o += a;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SumRows(x), rg)
    }

    /// Euclidean norm of each row. The derivative at a zero row is taken as 0.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let data = (0..v.rows())
            .map(|i| v.row(i).iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let out = Mat::from_vec(v.rows(), 1, data).expect("shape");
        let rg = self.rg(x);
        self.push(out, Op::RowNorm(x), rg)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        let shape = self.shape(out);
        if shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {shape:?}"
            )));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; out.0 + 1];
        adj[out.0] = Some(Mat::scalar(1.0));

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(a) => a.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    adj[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(&mut adj, *a, reduce_to(&g, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        acc(&mut adj, *b, reduce_to(&g, self.shape(*b)));
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(&mut adj, *a, reduce_to(&g, self.shape(*a)));
                    }
                    if self.rg(*b) {
                        acc(&mut adj, *b, reduce_to(&g.map(|v| -v), self.shape(*b)));
                    }
                }
                Op::Mul(a, b) | Op::Div(a, b) => {
                    let is_div = matches!(node.op, Op::Div(..));
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    if self.rg(*a) {
                        let mut ga = g.clone();
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                let y = vb.as_slice()[bidx(vb, i, j)];
                                let k = i * g.cols() + j;
                                ga.as_mut_slice()[k] = if is_div { g.as_slice()[k] / y } else { g.as_slice()[k] * y };
                            }
                        }
                        acc(&mut adj, *a, reduce_to(&ga, va.shape()));
                    }
                    if self.rg(*b) {
                        let mut gb = g.clone();
                        for i in 0..g.rows() {
                            for j in 0..g.cols() {
                                let x = va.as_slice()[bidx(va, i, j)];
                                let k = i * g.cols() + j;
                                gb.as_mut_slice()[k] = if is_div {
                                    let y = vb.as_slice()[bidx(vb, i, j)];
                                    -g.as_slice()[k] * x / (y * y)
                                } else {
                                    g.as_slice()[k] * x
                                };
                            }
                        }
                        acc(&mut adj, *b, reduce_to(&gb, vb.shape()));
                    }
                }
                Op::Unary(f, order, x) => {
                    let vx = self.value(*x);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(vx.as_slice())
                        .map(|(&gi, &xi)| gi * f.eval(order + 1, xi))
                        .collect();
                    acc(&mut adj, *x, Mat::from_vec(g.rows(), g.cols(), data).expect("shape"));
                }
                Op::Scale(x, k) => acc(&mut adj, *x, g.map(|v| v * k)),
                Op::Offset(x) => acc(&mut adj, *x, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let mut ga = Mat::zeros(va.rows(), va.cols());
                        gemm(&g, false, vb, true, &mut ga, 0.0);
                        acc(&mut adj, *a, ga);
                    }
                    if self.rg(*b) {
                        let mut gb = Mat::zeros(vb.rows(), vb.cols());
                        gemm(va, true, &g, false, &mut gb, 0.0);
                        acc(&mut adj, *b, gb);
                    }
                }
                Op::Transpose(x) => acc(&mut adj, *x, g.transpose()),
                Op::SelectCols(x, cols) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Mat::zeros(r, c);
                    for i in 0..r {
                        for (j, &cj) in cols.iter().enumerate() {
                            let k = i * c + cj;
                            gx.as_mut_slice()[k] += g.get(i, j);
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        if self.rg(p) {
                            let mut gp = Mat::zeros(r, c);
                            for i in 0..r {
                                gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                            }
                            acc(&mut adj, p, gp);
                        }
                        off += c;
                    }
                }
                Op::SumAll(x) => {
                    let (r, c) = self.shape(*x);
                    acc(&mut adj, *x, Mat::filled(r, c, g.item()));
                }
                Op::SumCols(x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Mat::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        gx.row_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::SumRows(x) => {
                    let (r, c) = self.shape(*x);
                    let mut gx = Mat::zeros(r, c);
                    for i in 0..r {
                        gx.row_mut(i).copy_from_slice(g.row(0));
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::RowNorm(x) => {
                    let vx = self.value(*x);
                    let norms = &node.value;
                    let mut gx = Mat::zeros(vx.rows(), vx.cols());
                    for i in 0..vx.rows() {
                        let n = norms.get(i, 0);
                        if n > 0.0 {
                            let s = g.get(i, 0) / n;
                            for (o, &xi) in gx.row_mut(i).iter_mut().zip(vx.row(i)) {
                                *o = s * xi;
                            }
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
            }
        }
        Ok(Grads { adj })
    }
}
