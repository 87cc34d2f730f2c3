//! Define-by-run reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an arena of nodes appended in evaluation order, so node
//! indices are already a topological order. Every operation records its
//! inputs and output value; [`Graph::backward`] walks the arena once from the
//! root down to index 0 and accumulates gradients into each node that
//! requires them.
//!
//! Batches are stored column-wise: an input batch of `B` points in `d`
//! dimensions is a `d × B` tensor, and a single point is a `d × 1` column.
//!
//! ```
//! use arfl::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0), true);
//! let y = g.leaf(Tensor::scalar(4.0), true);
//! let z = g.mul(x, y).unwrap();
//! g.backward(z).unwrap();
//! assert_eq!(g.grad(x).item(), 4.0);
//! assert_eq!(g.grad(y).item(), 3.0);
//! ```

use crate::error::{ArflError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ArflError::Dimension {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Column vector (`n × 1`).
    pub fn column(data: Vec<f64>) -> Self {
        Tensor {
            rows: data.len(),
            cols: 1,
            data,
        }
    }

    /// Row vector (`1 × n`).
    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Stacks equal-length points as the columns of a `d × n` batch.
    pub fn from_columns(points: &[Vec<f64>]) -> Result<Self> {
        let d = points.first().map_or(0, Vec::len);
        let n = points.len();
        let mut t = Tensor::zeros(d, n);
        for (j, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(ArflError::Dimension {
                    op: "from_columns",
                    left: (d, 1),
                    right: (p.len(), 1),
                });
            }
            for (i, v) in p.iter().enumerate() {
                t.data[i * n + j] = *v;
            }
        }
        Ok(t)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// The single entry of a `1 × 1` tensor.
    ///
    /// Panics if the tensor is not scalar.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn column_at(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Nonlinearities available as entrywise graph operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Tanh,
    Relu,
    Sigmoid,
    Abs,
}

impl Nonlinearity {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Sigmoid => sigmoid(x),
            Nonlinearity::Abs => x.abs(),
        }
    }

    /// Derivative given the input `x` and the output `y = f(x)`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => 1.0 - y * y,
            Nonlinearity::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Sigmoid => y * (1.0 - y),
            // subgradient 0 at exactly 0
            Nonlinearity::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { w: NodeId, b: NodeId, x: NodeId },
    Map { kind: Nonlinearity, x: NodeId },
    Softplus(NodeId),
    Ln(NodeId),
    Clamp { x: NodeId, lo: f64, hi: f64 },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleShift { x: NodeId, scale: f64 },
    Sum(NodeId),
    Mean(NodeId),
    ColumnMean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
    requires_grad: bool,
}

/// Operation arena for one forward/backward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let grad = Tensor::zeros(value.rows, value.cols);
        self.nodes.push(Node {
            op,
            value,
            grad,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Adds an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Adds a tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.node(id).value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.node(id).grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.node(id).value.shape()
    }

    /// `W·X + b`, with `b` (`m × 1`) added to every column of the product.
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(w);
        let (xn, batch) = self.shape(x);
        if xn != n {
            return Err(ArflError::Dimension {
                op: "affine",
                left: (m, n),
                right: (xn, batch),
            });
        }
        if self.shape(b) != (m, 1) {
            return Err(ArflError::Dimension {
                op: "affine bias",
                left: (m, 1),
                right: self.shape(b),
            });
        }
        let wv = &self.node(w).value.data;
        let bv = &self.node(b).value.data;
        let xv = &self.node(x).value.data;
        let mut out = vec![0.0; m * batch];
        for i in 0..m {
            let row = &mut out[i * batch..(i + 1) * batch];
            row.iter_mut().for_each(|v| *v = bv[i]);
            for k in 0..n {
                let wik = wv[i * n + k];
                if wik == 0.0 {
                    continue;
                }
                let xrow = &xv[k * batch..(k + 1) * batch];
                for (o, &xk) in row.iter_mut().zip(xrow) {
                    *o += wik * xk;
                }
            }
        }
        let rg = self.rg(w) || self.rg(b) || self.rg(x);
        let value = Tensor {
            rows: m,
            cols: batch,
            data: out,
        };
        Ok(self.push(Op::Affine { w, b, x }, value, rg))
    }

    pub fn elementwise(&mut self, kind: Nonlinearity, x: NodeId) -> NodeId {
        let value = self.node(x).value.map(|v| kind.apply(v));
        let rg = self.rg(x);
        self.push(Op::Map { kind, x }, value, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Nonlinearity::Tanh, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Nonlinearity::Relu, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Nonlinearity::Sigmoid, x)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.elementwise(Nonlinearity::Abs, x)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.node(x).value.map(softplus);
        let rg = self.rg(x);
        self.push(Op::Softplus(x), value, rg)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.node(x).value.map(f64::ln);
        let rg = self.rg(x);
        self.push(Op::Ln(x), value, rg)
    }

    /// Entrywise clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.node(x).value.map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(Op::Clamp { x, lo, hi }, value, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if av.shape() != bv.shape() {
            return Err(ArflError::Dimension {
                op: name,
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        Ok((value, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (value, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    /// Entrywise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    /// `scale · x + shift`, entrywise.
    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.node(x).value.map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(Op::ScaleShift { x, scale }, value, rg)
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.scale_shift(x, scale, 0.0)
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.node(x).value.data.iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Mean of all entries as a `1 × 1` tensor.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.node(x).value;
        if v.is_empty() {
            return Err(ArflError::Contract("mean of an empty tensor".into()));
        }
        let s = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        Ok(self.push(Op::Mean(x), Tensor::scalar(s), rg))
    }

    /// Mean over rows: `r × c` becomes `1 × c` (one value per sample column).
    pub fn column_mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.node(x).value;
        if v.rows == 0 {
            return Err(ArflError::Contract("column mean over zero rows".into()));
        }
        let mut out = vec![0.0; v.cols];
        for r in 0..v.rows {
            for (o, &e) in out.iter_mut().zip(&v.data[r * v.cols..(r + 1) * v.cols]) {
                *o += e;
            }
        }
        let inv = 1.0 / v.rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(Op::ColumnMean(x), Tensor::row(out), rg))
    }

    /// Gradients of `root` with respect to every node, zeroing previous gradients first.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        for n in &mut self.nodes {
            n.grad.fill_zero();
        }
        self.backward_accumulate(root)
    }

    /// Like [`Graph::backward`] but adds to whatever gradients are already stored.
    pub fn backward_accumulate(&mut self, root: NodeId) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(ArflError::Contract(format!(
                "backward root must be 1x1, got {}x{}",
                shape.0, shape.1
            )));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut reached = vec![false; root.0 + 1];
        reached[root.0] = true;
        let mut seed = self.nodes[root.0].grad.data[0];
        seed += 1.0;
        self.nodes[root.0].grad.data[0] = seed;
        // Only the root's own contribution must be propagated in accumulate
        // mode, so the upstream grad is tracked separately from stored grads.
        let mut upstream: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        upstream[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !reached[i] || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = upstream[i].take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let mut contribs: Vec<(usize, Tensor)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => {}
                Op::Affine { w, b, x } => {
                    let (wv, xv) = (&before[w.0].value, &before[x.0].value);
                    let (m, n) = wv.shape();
                    let batch = xv.cols;
                    if before[w.0].requires_grad {
                        let mut dw = Tensor::zeros(m, n);
                        for r in 0..m {
                            let grow = &g.data[r * batch..(r + 1) * batch];
                            for k in 0..n {
                                let xrow = &xv.data[k * batch..(k + 1) * batch];
                                dw.data[r * n + k] =
                                    grow.iter().zip(xrow).map(|(a, b)| a * b).sum();
                            }
                        }
                        contribs.push((w.0, dw));
                    }
                    if before[b.0].requires_grad {
                        let db: Vec<f64> = (0..m)
                            .map(|r| g.data[r * batch..(r + 1) * batch].iter().sum())
                            .collect();
                        contribs.push((b.0, Tensor::column(db)));
                    }
                    if before[x.0].requires_grad {
                        let mut dx = Tensor::zeros(n, batch);
                        for r in 0..m {
                            let grow = &g.data[r * batch..(r + 1) * batch];
                            for k in 0..n {
                                let wrk = wv.data[r * n + k];
                                let drow = &mut dx.data[k * batch..(k + 1) * batch];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += wrk * gv;
                                }
                            }
                        }
                        contribs.push((x.0, dx));
                    }
                }
                Op::Map { kind, x } => {
                    let xv = &before[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .zip(&node.value.data)
                        .map(|((gv, &xi), &yi)| gv * kind.derivative(xi, yi))
                        .collect();
                    contribs.push((x.0, Tensor { rows: g.rows, cols: g.cols, data }));
                }
                Op::Softplus(x) => {
                    let xv = &before[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(gv, &xi)| gv * sigmoid(xi))
                        .collect();
                    contribs.push((x.0, Tensor { rows: g.rows, cols: g.cols, data }));
                }
                Op::Ln(x) => {
                    let xv = &before[x.0].value;
                    let data = g.data.iter().zip(&xv.data).map(|(gv, xi)| gv / xi).collect();
                    contribs.push((x.0, Tensor { rows: g.rows, cols: g.cols, data }));
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &before[x.0].value;
                    let data = g
                        .data
                        .iter()
                        .zip(&xv.data)
                        .map(|(&gv, &xi)| if xi >= *lo && xi <= *hi { gv } else { 0.0 })
                        .collect();
                    contribs.push((x.0, Tensor { rows: g.rows, cols: g.cols, data }));
                }
                Op::Add(a, b) => {
                    contribs.push((a.0, g.clone()));
                    contribs.push((b.0, g.clone()));
                }
                Op::Sub(a, b) => {
                    contribs.push((a.0, g.clone()));
                    contribs.push((b.0, g.map(|v| -v)));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&before[a.0].value, &before[b.0].value);
                    let da = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    let db = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    contribs.push((a.0, Tensor { rows: g.rows, cols: g.cols, data: da }));
                    contribs.push((b.0, Tensor { rows: g.rows, cols: g.cols, data: db }));
                }
                Op::ScaleShift { x, scale } => {
                    contribs.push((x.0, g.map(|v| v * scale)));
                }
                Op::Sum(x) => {
                    let (r, c) = before[x.0].value.shape();
                    contribs.push((x.0, Tensor::filled(r, c, g.data[0])));
                }
                Op::Mean(x) => {
                    let (r, c) = before[x.0].value.shape();
                    contribs.push((x.0, Tensor::filled(r, c, g.data[0] / (r * c) as f64)));
                }
                Op::ColumnMean(x) => {
                    let (r, c) = before[x.0].value.shape();
                    let inv = 1.0 / r as f64;
                    let mut d = Tensor::zeros(r, c);
                    for row in 0..r {
                        for (dv, gv) in d.data[row * c..(row + 1) * c].iter_mut().zip(&g.data) {
                            *dv = gv * inv;
                        }
                    }
                    contribs.push((x.0, d));
                }
            }
            for (idx, c) in contribs {
                if !before[idx].requires_grad {
                    continue;
                }
                for (s, v) in before[idx].grad.data.iter_mut().zip(&c.data) {
                    *s += v;
                }
                match &mut upstream[idx] {
                    Some(u) => {
                        for (s, v) in u.data.iter_mut().zip(&c.data) {
                            *s += v;
                        }
                    }
                    slot @ None => *slot = Some(c),
                }
                reached[idx] = true;
            }
        }
        Ok(())
    }
}

/// Central finite-difference gradient of a scalar function of a tensor.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        out.data[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Elementwise relative error `|a − b| / max(|a|, |b|, 1e-8)`, maximized over entries.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
