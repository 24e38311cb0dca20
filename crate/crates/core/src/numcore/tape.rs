//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its value and the references it
//! was computed from. [`Tape::backward`] walks the nodes in reverse
//! execution order and accumulates vector-Jacobian products into the
//! persistent gradients of the leaves that require them.
//!
//! Intermediate gradients live in a scratch buffer that is discarded after
//! each pass, so calling `backward` twice adds exactly two copies of the
//! gradient to every leaf.

use rand::Rng;

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    RsqrtOrZero(Var),
    SumAll(Var),
    MeanRows(Var),
    RowSum(Var),
    RowL2Norm(Var),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulRow(Var, Var),
    DivCol(Var, Var),
    SetDiagonal(Var),
    Gather(Var, Vec<(usize, usize)>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulCol(a, b)
            | MulRow(a, b) | DivCol(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Exp(a) | Log(a) | Sqrt(a) | Clamp(a, _, _)
            | RsqrtOrZero(a) | SumAll(a) | MeanRows(a) | RowSum(a) | RowL2Norm(a)
            | SoftmaxRows(a) | Transpose(a) | SetDiagonal(a) | Gather(a, _) => vec![*a],
            ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// Floor on the squared norm in [`Tape::row_l2_norm`].
pub const NORM_EPSILON: f64 = 1e-12;

/// Ordered record of executed operations.
///
/// A tape and its variables belong to a single thread of execution;
/// independent tapes can be driven concurrently.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Matrix::zeros(value.rows(), value.cols()));
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.as_mut_slice().fill(0.0);
            }
        }
    }

    /// Forgets every recorded operation and resets gradients.
    ///
    /// Existing handles stay valid but are detached: each former result
    /// becomes a constant, so a later backward pass reaches no leaf.
    pub fn clear(&mut self) {
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Leaf;
                node.requires_grad = false;
            }
        }
        self.zero_grad();
    }

    /// Back-propagates from a 1×1 `root`, adding into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(Error::shape("backward", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::ones(1, 1));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(acc) = self.nodes[i].grad.as_mut() {
                    acc.axpy(1.0, &g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut send = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.axpy(1.0, &contrib),
                None => grads[v.0] = Some(contrib),
            }
        };
        let needs = |v: &Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    let mut ga = Matrix::zeros(val(a).rows(), val(a).cols());
                    gemm(false, g, true, val(b), 0.0, &mut ga);
                    send(*a, ga);
                }
                if needs(b) {
                    let mut gb = Matrix::zeros(val(b).rows(), val(b).cols());
                    gemm(true, val(a), false, g, 0.0, &mut gb);
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    send(*a, g.zip_map(val(b), |g, b| g * b));
                }
                if needs(b) {
                    send(*b, g.zip_map(val(a), |g, a| g * a));
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Relu(a) => send(*a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Exp(a) => send(*a, g.zip_map(y, |g, y| g * y)),
            Op::Log(a) => send(*a, g.zip_map(val(a), |g, x| g / x)),
            Op::Sqrt(a) => send(*a, g.zip_map(y, |g, y| g / (2.0 * y))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *a,
                    g.zip_map(val(a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                );
            }
            Op::RsqrtOrZero(a) => send(
                *a,
                g.zip_map(val(a), |g, x| {
                    if x > 0.0 {
                        -0.5 * g * x.powf(-1.5)
                    } else {
                        0.0
                    }
                }),
            ),
            Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                send(*a, Matrix::filled(r, c, g.get(0, 0)));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(a).shape();
                let inv = 1.0 / r as f64;
                send(*a, Matrix::from_fn(r, c, |_, j| g.get(0, j) * inv));
            }
            Op::RowSum(a) => {
                let (r, c) = val(a).shape();
                send(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::RowL2Norm(a) => {
                let x = val(a);
                // rows at the floor are constant in x
                let floored: Vec<bool> = (0..x.rows())
                    .map(|i| squared_norm(x.row(i)) <= NORM_EPSILON)
                    .collect();
                send(
                    *a,
                    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
                        if floored[i] {
                            0.0
                        } else {
                            g.get(i, 0) * x.get(i, j) / y.get(i, 0)
                        }
                    }),
                );
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(p).shape();
                    if needs(p) {
                        send(*p, Matrix::from_fn(r, c, |i, j| g.get(i, offset + j)));
                    }
                    offset += c;
                }
            }
            Op::SoftmaxRows(a) => {
                let mut gx = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for (o, (y, g)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = y * (g - dot);
                    }
                }
                send(*a, gx);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::AddRow(a, b) => {
                send(*a, g.clone());
                if needs(b) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::MulCol(a, c) => {
                let x = val(a);
                let cv = val(c);
                if needs(a) {
                    send(
                        *a,
                        Matrix::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j) * cv.get(i, 0)),
                    );
                }
                if needs(c) {
                    send(*c, row_dot(g, x));
                }
            }
            Op::MulRow(a, r) => {
                let x = val(a);
                let rv = val(r);
                if needs(a) {
                    send(
                        *a,
                        Matrix::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j) * rv.get(0, j)),
                    );
                }
                if needs(r) {
                    let mut gr = Matrix::zeros(1, x.cols());
                    for i in 0..x.rows() {
                        for ((o, gv), xv) in gr.as_mut_slice().iter_mut().zip(g.row(i)).zip(x.row(i))
                        {
                            *o += gv * xv;
                        }
                    }
                    send(*r, gr);
                }
            }
            Op::DivCol(a, c) => {
                let x = val(a);
                let cv = val(c);
                if needs(a) {
                    send(
                        *a,
                        Matrix::from_fn(x.rows(), x.cols(), |i, j| g.get(i, j) / cv.get(i, 0)),
                    );
                }
                if needs(c) {
                    let mut gc = row_dot(g, x);
                    for (o, &c) in gc.as_mut_slice().iter_mut().zip(cv.as_slice()) {
                        *o = -*o / (c * c);
                    }
                    send(*c, gc);
                }
            }
            Op::SetDiagonal(a) => {
                let mut gx = g.clone();
                for k in 0..gx.rows() {
                    gx.set(k, k, 0.0);
                }
                send(*a, gx);
            }
            Op::Gather(a, picks) => {
                let (r, c) = val(a).shape();
                let mut gx = Matrix::zeros(r, c);
                for (k, &(i, j)) in picks.iter().enumerate() {
                    gx.set(i, j, gx.get(i, j) + g.get(k, 0));
                }
                send(*a, gx);
            }
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let value = x.zip_map(y, |a, b| a * b);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        self.push(value, Op::AddScalar(a))
    }

    /// ReLU; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::exp);
        if !value.is_finite() {
            return Err(Error::Numerical("exp overflowed".into()));
        }
        Ok(self.push(value, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.as_slice().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        let value = x.map(f64::ln);
        Ok(self.push(value, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if let Some(bad) = x.as_slice().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::domain("sqrt", format!("non-positive input {bad}")));
        }
        let value = x.map(f64::sqrt);
        Ok(self.push(value, Op::Sqrt(a)))
    }

    /// Clamps into `[lo, hi]`; gradient passes where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    /// `x^{-1/2}` for positive entries and `0` elsewhere.
    pub fn rsqrt_or_zero(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 });
        self.push(value, Op::RsqrtOrZero(a))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        non_empty("sum_all", x)?;
        let value = Matrix::filled(1, 1, x.sum());
        Ok(self.push(value, Op::SumAll(a)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Average of the rows: `N×C → 1×C`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        non_empty("mean_rows", x)?;
        let inv = 1.0 / x.rows() as f64;
        let mut value = Matrix::zeros(1, x.cols());
        for i in 0..x.rows() {
            for (o, v) in value.as_mut_slice().iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let value = value.scale(inv);
        Ok(self.push(value, Op::MeanRows(a)))
    }

    /// Per-row sum: `N×C → N×1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        non_empty("row_sum", x)?;
        let value = Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        Ok(self.push(value, Op::RowSum(a)))
    }

    /// Per-row Euclidean norm `sqrt(max(Σ x², 1e-12))`: `N×C → N×1`.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        non_empty("row_l2_norm", x)?;
        let value = Matrix::from_fn(x.rows(), 1, |i, _| {
            squared_norm(x.row(i)).max(NORM_EPSILON).sqrt()
        });
        Ok(self.push(value, Op::RowL2Norm(a)))
    }

    // ---- structure ------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::EmptyInput {
                op: "concat_cols",
                message: "no parts".into(),
            });
        };
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(Error::shape("concat_cols", (rows, cols), s));
            }
            cols += s.1;
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let out = value.row_mut(i);
            let mut offset = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(i);
                out[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::Numerical("non-finite input to softmax_rows".into()));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// `x + b` with a `1×C` row broadcast over every row of `x`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(b));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, v) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += v;
            }
        }
        Ok(self.push(value, Op::AddRow(a, b)))
    }

    /// Scales row `i` of `x` by `c[i]` (`c` is `N×1`).
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (x, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != x.rows() {
            return Err(Error::shape("mul_col", x.shape(), cv.shape()));
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * cv.get(i, 0));
        Ok(self.push(value, Op::MulCol(a, c)))
    }

    /// Scales column `j` of `x` by `r[j]` (`r` is `1×C`).
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (x, rv) = (self.value(a), self.value(r));
        if rv.rows() != 1 || rv.cols() != x.cols() {
            return Err(Error::shape("mul_row", x.shape(), rv.shape()));
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) * rv.get(0, j));
        Ok(self.push(value, Op::MulRow(a, r)))
    }

    /// Divides row `i` of `x` by `c[i]` (`c` is `N×1`, nonzero).
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (x, cv) = (self.value(a), self.value(c));
        if cv.cols() != 1 || cv.rows() != x.rows() {
            return Err(Error::shape("div_col", x.shape(), cv.shape()));
        }
        if cv.as_slice().contains(&0.0) {
            return Err(Error::domain("div_col", "division by zero"));
        }
        let value = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) / cv.get(i, 0));
        Ok(self.push(value, Op::DivCol(a, c)))
    }

    /// Overwrites the diagonal with `value`; no gradient flows through it.
    pub fn set_diagonal(&mut self, a: Var, value: f64) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != x.cols() {
            return Err(Error::shape("set_diagonal", x.shape(), (x.rows(), x.rows())));
        }
        let mut out = x.clone();
        for k in 0..out.rows() {
            out.set(k, k, value);
        }
        Ok(self.push(out, Op::SetDiagonal(a)))
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1 / (1 − rate)`. A zero rate draws nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::domain("dropout", format!("rate {rate} outside [0, 1]")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 - rate;
        let mask = Matrix::from_fn(r, c, |_, _| {
            if rng.random::<f64>() >= rate {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Collects `x[i, j]` for each `(i, j)` into a column vector.
    pub fn gather(&mut self, a: Var, picks: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        for &(i, j) in picks {
            if i >= x.rows() || j >= x.cols() {
                return Err(Error::shape("gather", x.shape(), (i, j)));
            }
        }
        let value = Matrix::from_fn(picks.len(), 1, |k, _| {
            let (i, j) = picks[k];
            x.get(i, j)
        });
        Ok(self.push(value, Op::Gather(a, picks.to_vec())))
    }
}

fn squared_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).sum()
}

fn non_empty(op: &'static str, x: &Matrix) -> Result<()> {
    if x.is_empty() {
        return Err(Error::EmptyInput {
            op,
            message: format!("empty {}x{} input", x.rows(), x.cols()),
        });
    }
    Ok(())
}

/// `out[i] = Σ_j g[i, j] x[i, j]` as an `N×1` column.
fn row_dot(g: &Matrix, x: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), 1, |i, _| {
        g.row(i).iter().zip(x.row(i)).map(|(a, b)| a * b).sum()
    })
}
