//! Define-by-run reverse-mode autodiff over 2-D f64 tensors.
//!
//! Nodes are appended in creation order, so walking the node list backwards
//! is a reverse topological order and each node is visited exactly once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Tanh,
    SiLU,
    Softplus,
    Sigmoid,
    Identity,
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::SiLU => silu(x),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::SiLU => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Act(Activation),
    Exp,
    Ln,
    Neg,
    Square,
    Scale(f64),
}

#[derive(Debug, Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

/// Fused operation with a hand-written backward pass.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Binary { kind: Bin, a: Var, b: Var, bcast: Bcast },
    Unary { kind: Unary, x: Var },
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape. With `track = false` parameters become constants and
/// nothing needs gradients; useful for inference and target networks.
pub struct Tape {
    nodes: Vec<Node>,
    track: bool,
}

pub struct Gradients {
    vars: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), track: true }
    }

    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), track: false }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let track = self.track;
        self.push(t, Op::Leaf, track)
    }

    /// Named trainable leaf. Repeated uses of the same name accumulate.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        if self.track {
            self.push(t, Op::Param(name.to_string()), true)
        } else {
            self.push(t, Op::Leaf, false)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape, tb.shape));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(ta, false, tb, false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, kind: Bin, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = (ta.rows(), ta.cols());
        let bcast = if ta.shape == tb.shape {
            Bcast::Same
        } else if tb.shape == [1, 1] {
            Bcast::Scalar
        } else if tb.shape == [1, n] {
            Bcast::Row
        } else if tb.shape == [m, 1] {
            Bcast::Col
        } else {
            return shape_err("binary", format!("{:?} with {:?}", ta.shape, tb.shape));
        };
        let f = |x: f64, y: f64| match kind {
            Bin::Add => x + y,
            Bin::Sub => x - y,
            Bin::Mul => x * y,
            Bin::Div => x / y,
        };
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let y = tb.data[bidx(bcast, i, j, n)];
                out.data[i * n + j] = f(ta.data[i * n + j], y);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Binary { kind, a, b, bcast }, ng))
    }

    /// `a + b`; `b` may be the same shape, a row `[1, n]`, a column `[m, 1]` or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Bin::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let tx = self.value(x);
        let out = match kind {
            Unary::Act(act) => tx.map(|v| act.apply(v)),
            Unary::Exp => tx.map(f64::exp),
            Unary::Ln => tx.map(f64::ln),
            Unary::Neg => tx.map(|v| -v),
            Unary::Square => tx.map(|v| v * v),
            Unary::Scale(c) => tx.map(|v| c * v),
        };
        let ng = self.ng(x);
        self.push(out, Op::Unary { kind, x }, ng)
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return x;
        }
        self.unary(Unary::Act(act), x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::ReLU)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::SiLU)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data.iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    /// Column sums, `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut out = Tensor::zeros(1, n);
        for row in t.data.chunks(n.max(1)) {
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SumRows(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let ng = self.ng(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return shape_err("concat_cols", "no inputs");
        };
        let m = self.value(*first).rows();
        if xs.iter().any(|&x| self.value(x).rows() != m) {
            return shape_err("concat_cols", "row counts differ");
        }
        let n: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut out = Tensor::zeros(m, n);
        let mut off = 0;
        for &x in xs {
            let t = self.value(x);
            let c = t.cols();
            for i in 0..m {
                out.data[i * n + off..i * n + off + c].copy_from_slice(&t.data[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return shape_err("slice_cols", format!("[{start}, {}) of {n} columns", start + len));
        }
        let mut out = Tensor::zeros(m, len);
        for i in 0..m {
            out.data[i * len..(i + 1) * len].copy_from_slice(&t.data[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return shape_err("gather_rows", format!("row {bad} of {m}"));
        }
        let mut out = Tensor::zeros(rows.len(), n);
        for (k, &r) in rows.iter().enumerate() {
            out.data[k * n..(k + 1) * n].copy_from_slice(&t.data[r * n..(r + 1) * n]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, ng))
    }

    /// Records a fused op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Var {
        let ng = inputs.iter().any(|&x| self.ng(x));
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.shape != [1, 1] {
            return shape_err("backward", format!("loss must be [1, 1], got {:?}", lt.shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => match params.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                },
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let tb = self.value(*b);
                        let mut ga = Tensor::zeros(g.rows(), tb.rows());
                        gemm(&g, false, tb, true, &mut ga, false);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let ta = self.value(*a);
                        let mut gb = Tensor::zeros(ta.cols(), g.cols());
                        gemm(ta, true, &g, false, &mut gb, false);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Binary { kind, a, b, bcast } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, n) = (ta.rows(), ta.cols());
                    if self.ng(*a) {
                        let mut ga = Tensor::zeros(m, n);
                        for i in 0..m {
                            for j in 0..n {
                                let k = i * n + j;
                                let y = tb.data[bidx(*bcast, i, j, n)];
                                ga.data[k] = match kind {
                                    Bin::Add | Bin::Sub => g.data[k],
                                    Bin::Mul => g.data[k] * y,
                                    Bin::Div => g.data[k] / y,
                                };
                            }
                        }
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let mut gb = Tensor { shape: tb.shape.clone(), data: vec![0.0; tb.len()] };
                        for i in 0..m {
                            for j in 0..n {
                                let k = i * n + j;
                                let bi = bidx(*bcast, i, j, n);
                                let y = tb.data[bi];
                                gb.data[bi] += match kind {
                                    Bin::Add => g.data[k],
                                    Bin::Sub => -g.data[k],
                                    Bin::Mul => g.data[k] * ta.data[k],
                                    Bin::Div => -g.data[k] * ta.data[k] / (y * y),
                                };
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Unary { kind, x } => {
                    let tx = self.value(*x);
                    let y = &node.value;
                    let mut gx = Tensor::zeros(tx.rows(), tx.cols());
                    for k in 0..tx.len() {
                        let (xv, yv) = (tx.data[k], y.data[k]);
                        let d = match kind {
                            Unary::Act(act) => act.deriv(xv, yv),
                            Unary::Exp => yv,
                            Unary::Ln => 1.0 / xv,
                            Unary::Neg => -1.0,
                            Unary::Square => 2.0 * xv,
                            Unary::Scale(c) => *c,
                        };
                        gx.data[k] = g.data[k] * d;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let t = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::filled(t.rows(), t.cols(), g.data[0]));
                }
                Op::MeanAll(x) => {
                    let t = self.value(*x);
                    let v = g.data[0] / t.len().max(1) as f64;
                    accumulate(&mut grads, *x, Tensor::filled(t.rows(), t.cols(), v));
                }
                Op::SumRows(x) => {
                    let t = self.value(*x);
                    let (m, n) = (t.rows(), t.cols());
                    let mut gx = Tensor::zeros(m, n);
                    for row in gx.data.chunks_mut(n.max(1)) {
                        row.copy_from_slice(&g.data);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Transpose(x) => accumulate(&mut grads, *x, g.transpose()),
                Op::ConcatCols(xs) => {
                    let n = g.cols();
                    let m = g.rows();
                    let mut off = 0;
                    for &x in xs {
                        let c = self.value(x).cols();
                        if self.ng(x) {
                            let mut gx = Tensor::zeros(m, c);
                            for i in 0..m {
                                gx.data[i * c..(i + 1) * c].copy_from_slice(&g.data[i * n + off..i * n + off + c]);
                            }
                            accumulate(&mut grads, x, gx);
                        }
                        off += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let t = self.value(*x);
                    let (m, n) = (t.rows(), t.cols());
                    let len = g.cols();
                    let mut gx = Tensor::zeros(m, n);
                    for i in 0..m {
                        gx.data[i * n + start..i * n + start + len].copy_from_slice(&g.data[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { x, rows } => {
                    let t = self.value(*x);
                    let n = t.cols();
                    let mut gx = Tensor::zeros(t.rows(), n);
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx.data[r * n + j] += g.data[k * n + j];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&x| self.value(x)).collect();
                    let gs = op.backward(&ins, &node.value, &g);
                    for (&x, gx) in inputs.iter().zip(gs) {
                        if self.ng(x) {
                            if gx.shape != self.value(x).shape {
                                return shape_err(op.name(), "backward returned a mis-shaped gradient");
                            }
                            accumulate(&mut grads, x, gx);
                        }
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }

        for (name, g) in &params {
            if !g.all_finite() {
                return Err(NnError::NonFiniteGradient(name.clone()));
            }
        }
        Ok(Gradients { vars: grads, params })
    }
}

fn bidx(bcast: Bcast, i: usize, j: usize, n: usize) -> usize {
    match bcast {
        Bcast::Same => i * n + j,
        Bcast::Row => j,
        Bcast::Col => i,
        Bcast::Scalar => 0,
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_bias_relu_example() {
        // x = [1, 2], W = [[1, 0], [0, -1]], b = [0.5, 0.5]
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![1.0, 2.0]));
        let w = tape.param("w", Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, -1.0]).unwrap());
        let b = tape.param("b", Tensor::row(vec![0.5, 0.5]));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.add(h, b).unwrap();
        let y = tape.relu(h);
        assert_eq!(tape.value(y).data, vec![1.5, 0.0]);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap().data, vec![1.0, 0.0, 2.0, 0.0]);
        assert_eq!(g.param("b").unwrap().data, vec![1.0, 0.0]);
    }

    #[test]
    fn repeated_param_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::scalar(3.0));
        let a2 = tape.param("a", Tensor::scalar(3.0));
        let p = tape.mul(a, a2).unwrap();
        let g = tape.backward(p).unwrap();
        assert_eq!(g.param("a").unwrap().data, vec![6.0]);
    }

    #[test]
    fn broadcast_shapes_are_checked() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(3, 2));
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn inference_tape_has_no_param_grads() {
        let mut tape = Tape::inference();
        let a = tape.param("a", Tensor::scalar(2.0));
        let s = tape.square(a);
        let g = tape.backward(s).unwrap();
        assert!(g.param("a").is_none());
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut tape = Tape::new();
        let a = tape.param("weights", Tensor::scalar(0.0));
        let l = tape.ln(a);
        let s = tape.sum(l);
        match tape.backward(s) {
            Err(NnError::NonFiniteGradient(name)) => assert_eq!(name, "weights"),
            other => panic!("expected non-finite error, got {:?}", other.map(|_| ())),
        }
    }
}
