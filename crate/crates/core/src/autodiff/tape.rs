use crate::error::{Error, Result};

use super::tensor::{Shape, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// A differentiable operation defined outside the tape's built-in set.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient (same length as the output). It returns one gradient
/// per input; entries whose `needs_grad` flag is false may be `None`.
pub trait Function: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Scalar,
}

enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Concat(Vec<Var>, Axis),
    Slice { src: Var, row0: usize, col0: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, Axis),
    Square(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Prelu(Var, Var),
    Softmax(Var, Axis),
    NormSq(Var),
    NormalizeRows(Var),
    Cosine(Var, Var),
    Custom(Vec<Var>, Box<dyn Function>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Concat(_, Axis::Rows) => "concat_rows",
            Op::Concat(_, Axis::Cols) => "concat_cols",
            Op::Slice { .. } => "slice",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::Prelu(..) => "prelu",
            Op::Softmax(..) => "softmax",
            Op::NormSq(..) => "norm_sq",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::Cosine(..) => "cosine_similarity",
            Op::Custom(_, f) => f.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Values are computed eagerly as ops are
/// added; [`Tape::backward`] walks the record in reverse once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    corruption: Option<(String, f64)>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the non-leaf ops recorded so far.
    pub fn op_names(&self) -> std::collections::BTreeSet<&'static str> {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).map(|n| n.op.name()).collect()
    }

    /// Test hook: scale the input gradients produced by every op named `op`.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &str, factor: f64) {
        self.corruption = Some((op.to_string(), factor));
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` before backward or
    /// for nodes the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Same value as `v`, cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Records the output of a user-defined [`Function`].
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, func: Box<dyn Function>) -> Var {
        let rg = inputs.iter().any(|&i| self.requires_grad(i));
        self.push(output, Op::Custom(inputs.to_vec(), func), rg)
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Same)
        } else if sb == Shape::SCALAR {
            Ok(Broadcast::Scalar)
        } else if sb.rows == 1 && sb.cols == sa.cols {
            Ok(Broadcast::Row)
        } else {
            Err(shape_err(op, format!("{sa} vs {sb}")))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Broadcast) -> Op,
    ) -> Result<Var> {
        let bc = self.broadcast(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => vb[i],
                    Broadcast::Row => vb[i % cols],
                    Broadcast::Scalar => vb[0],
                };
                f(x, y)
            })
            .collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(out, mk(a, b, bc), rg))
    }

    /// Elementwise sum; `b` may be a `1 × cols` row or a scalar broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.rows(), v.cols(), v.data().iter().map(|&a| f(a)).collect());
        let rg = self.requires_grad(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| a + c, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * a, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a.max(0.0), Op::Relu(x))
    }

    /// Parametric ReLU with a single learnable slope `a` (shape `1 × 1`).
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        if self.shape(a) != Shape::SCALAR {
            return Err(shape_err("prelu", format!("slope must be [1, 1], got {}", self.shape(a))));
        }
        let slope = self.value(a).item();
        let v = self.value(x);
        let out = Tensor::from_vec(
            v.rows(),
            v.cols(),
            v.data().iter().map(|&z| if z >= 0.0 { z } else { slope * z }).collect(),
        );
        let rg = self.requires_grad(x) || self.requires_grad(a);
        Ok(self.push(out, Op::Prelu(x, a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.cols != sb.rows {
            return Err(shape_err("matmul", format!("{sa} x {sb}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), sa.rows, sa.cols, sb.cols);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Tensor::from_vec(sa.rows, sb.cols, out), Op::MatMul(a, b), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.shape(p))
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let out = match axis {
            Axis::Rows => {
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let s = self.shape(p);
                    if s.cols != first.cols {
                        return Err(shape_err("concat_rows", format!("{first} vs {s}")));
                    }
                    rows += s.rows;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::from_vec(rows, first.cols, data)
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if s.rows != first.rows {
                        return Err(shape_err("concat_cols", format!("{first} vs {s}")));
                    }
                    cols += s.cols;
                }
                let mut data = Vec::with_capacity(first.rows * cols);
                for r in 0..first.rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::from_vec(first.rows, cols, data)
            }
        };
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sub-block `rows × cols` starting at (`row0`, `col0`).
    pub fn slice(&mut self, x: Var, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if row0 + rows > s.rows || col0 + cols > s.cols {
            return Err(shape_err(
                "slice",
                format!("[{row0}..{}, {col0}..{}] out of {s}", row0 + rows, col0 + cols),
            ));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            data.extend_from_slice(&v.row(r)[col0..col0 + cols]);
        }
        let rg = self.requires_grad(x);
        Ok(self.push(Tensor::from_vec(rows, cols, data), Op::Slice { src: x, row0, col0 }, rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(x).clone().reshaped(rows, cols)?;
        let rg = self.requires_grad(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.data().len().max(1) as f64;
        let s: f64 = v.data().iter().sum::<f64>() / n;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `Axis::Cols` sums each row into a `rows × 1` column; `Axis::Rows`
    /// sums each column into a `1 × cols` row.
    pub fn sum_axis(&mut self, x: Var, axis: Axis) -> Var {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let out = match axis {
            Axis::Cols => Tensor::from_vec(r, 1, (0..r).map(|i| v.row(i).iter().sum()).collect()),
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (a, b) in acc.iter_mut().zip(v.row(i)) {
                        *a += b;
                    }
                }
                Tensor::from_vec(1, c, acc)
            }
        };
        let rg = self.requires_grad(x);
        self.push(out, Op::SumAxis(x, axis), rg)
    }

    /// Numerically stabilised softmax. `Axis::Cols` normalises each row.
    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let mut out = v.data().to_vec();
        match axis {
            Axis::Cols => {
                for row in out.chunks_exact_mut(c.max(1)) {
                    softmax_in_place(row);
                }
            }
            Axis::Rows => {
                let mut col = vec![0.0; r];
                for j in 0..c {
                    for i in 0..r {
                        col[i] = out[i * c + j];
                    }
                    softmax_in_place(&mut col);
                    for i in 0..r {
                        out[i * c + j] = col[i];
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(r, c, out), Op::Softmax(x, axis), rg)
    }

    /// Squared Euclidean norm of each row, as a `rows × 1` column.
    pub fn norm_sq(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = (0..v.rows()).map(|i| v.row(i).iter().map(|a| a * a).sum()).collect();
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(v.rows(), 1, out), Op::NormSq(x), rg)
    }

    /// Each row scaled to unit length; zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut out = v.data().to_vec();
        for row in out.chunks_exact_mut(v.cols().max(1)) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n > NORM_FLOOR {
                row.iter_mut().for_each(|a| *a /= n);
            } else {
                row.iter_mut().for_each(|a| *a = 0.0);
            }
        }
        let rg = self.requires_grad(x);
        self.push(Tensor::from_vec(v.rows(), v.cols(), out), Op::NormalizeRows(x), rg)
    }

    /// Row-wise cosine similarity, `rows × 1`. Rows where either vector has
    /// (near) zero length yield 0 with zero gradient.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u), self.shape(v));
        if su != sv {
            return Err(shape_err("cosine_similarity", format!("{su} vs {sv}")));
        }
        let (a, b) = (self.value(u), self.value(v));
        let out = (0..su.rows)
            .map(|i| cosine_row(a.row(i), b.row(i)).0)
            .collect();
        let rg = self.requires_grad(u) || self.requires_grad(v);
        Ok(self.push(Tensor::from_vec(su.rows, 1, out), Op::Cosine(u, v), rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating gradients for every
    /// node that requires one. May only run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::invalid("backward: tape already consumed"));
        }
        if self.shape(loss) != Shape::SCALAR {
            return Err(shape_err("backward", format!("loss must be scalar, got {}", self.shape(loss))));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut contributions = self.local_backward(node, &g);
            if let Some((name, factor)) = &self.corruption {
                if node.op.name() == name {
                    for (_, c) in contributions.iter_mut() {
                        c.iter_mut().for_each(|x| *x *= factor);
                    }
                }
            }
            for (input, contrib) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                res.push((*a, g.to_vec()));
                if rg(*b) {
                    res.push((*b, reduce_broadcast(g, *bc, shp(*a), shp(*b))));
                }
            }
            Op::Sub(a, b, bc) => {
                res.push((*a, g.to_vec()));
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    res.push((*b, reduce_broadcast(&neg, *bc, shp(*a), shp(*b))));
                }
            }
            Op::Mul(a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let cols = shp(*a).cols;
                let bval = |i: usize| match bc {
                    Broadcast::Same => vb[i],
                    Broadcast::Row => vb[i % cols],
                    Broadcast::Scalar => vb[0],
                };
                if rg(*a) {
                    res.push((*a, g.iter().enumerate().map(|(i, gi)| gi * bval(i)).collect()));
                }
                if rg(*b) {
                    let full: Vec<f64> = g.iter().zip(va).map(|(gi, x)| gi * x).collect();
                    res.push((*b, reduce_broadcast(&full, *bc, shp(*a), shp(*b))));
                }
            }
            Op::Scale(x, c) => res.push((*x, g.iter().map(|gi| gi * c).collect())),
            Op::AddScalar(x) => res.push((*x, g.to_vec())),
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k, n) = (sa.rows, sa.cols, sb.cols);
                if rg(*a) {
                    // dA = G · Bᵀ
                    let vb = val(*b);
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * vb[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    res.push((*a, da));
                }
                if rg(*b) {
                    // dB = Aᵀ · G
                    let va = val(*a);
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gj) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += aip * gj;
                            }
                        }
                    }
                    res.push((*b, db));
                }
            }
            Op::Concat(parts, axis) => {
                let total = node.value.shape();
                match axis {
                    Axis::Rows => {
                        let mut off = 0;
                        for &p in parts {
                            let len = shp(p).len();
                            if rg(p) {
                                res.push((p, g[off..off + len].to_vec()));
                            }
                            off += len;
                        }
                    }
                    Axis::Cols => {
                        let mut col0 = 0;
                        for &p in parts {
                            let s = shp(p);
                            if rg(p) {
                                let mut d = Vec::with_capacity(s.len());
                                for r in 0..s.rows {
                                    let start = r * total.cols + col0;
                                    d.extend_from_slice(&g[start..start + s.cols]);
                                }
                                res.push((p, d));
                            }
                            col0 += s.cols;
                        }
                    }
                }
            }
            Op::Slice { src, row0, col0 } => {
                let s = shp(*src);
                let o = node.value.shape();
                let mut d = vec![0.0; s.len()];
                for r in 0..o.rows {
                    let dst = (row0 + r) * s.cols + col0;
                    d[dst..dst + o.cols].copy_from_slice(&g[r * o.cols..(r + 1) * o.cols]);
                }
                res.push((*src, d));
            }
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Sum(x) => res.push((*x, vec![g[0]; shp(*x).len()])),
            Op::Mean(x) => {
                let n = shp(*x).len().max(1) as f64;
                res.push((*x, vec![g[0] / n; shp(*x).len()]));
            }
            Op::SumAxis(x, axis) => {
                let s = shp(*x);
                let d = (0..s.len())
                    .map(|i| match axis {
                        Axis::Cols => g[i / s.cols],
                        Axis::Rows => g[i % s.cols],
                    })
                    .collect();
                res.push((*x, d));
            }
            Op::Square(x) => res.push((*x, g.iter().zip(val(*x)).map(|(gi, a)| 2.0 * a * gi).collect())),
            Op::Sqrt(x) => res.push((*x, g.iter().zip(out).map(|(gi, y)| gi / (2.0 * y)).collect())),
            Op::Tanh(x) => res.push((*x, g.iter().zip(out).map(|(gi, y)| gi * (1.0 - y * y)).collect())),
            Op::Sigmoid(x) => res.push((*x, g.iter().zip(out).map(|(gi, y)| gi * y * (1.0 - y)).collect())),
            Op::Relu(x) => res.push((
                *x,
                g.iter().zip(val(*x)).map(|(gi, a)| if *a > 0.0 { *gi } else { 0.0 }).collect(),
            )),
            Op::Prelu(x, a) => {
                let slope = val(*a)[0];
                let vx = val(*x);
                if rg(*x) {
                    res.push((
                        *x,
                        g.iter().zip(vx).map(|(gi, z)| if *z >= 0.0 { *gi } else { slope * gi }).collect(),
                    ));
                }
                if rg(*a) {
                    let da: f64 = g.iter().zip(vx).filter(|(_, z)| **z < 0.0).map(|(gi, z)| gi * z).sum();
                    res.push((*a, vec![da]));
                }
            }
            Op::Softmax(x, axis) => {
                let s = shp(*x);
                let mut d = vec![0.0; s.len()];
                match axis {
                    Axis::Cols => {
                        for r in 0..s.rows {
                            let span = r * s.cols..(r + 1) * s.cols;
                            let dot: f64 = g[span.clone()].iter().zip(&out[span.clone()]).map(|(a, b)| a * b).sum();
                            for i in span {
                                d[i] = out[i] * (g[i] - dot);
                            }
                        }
                    }
                    Axis::Rows => {
                        for c in 0..s.cols {
                            let dot: f64 = (0..s.rows).map(|r| g[r * s.cols + c] * out[r * s.cols + c]).sum();
                            for r in 0..s.rows {
                                let i = r * s.cols + c;
                                d[i] = out[i] * (g[i] - dot);
                            }
                        }
                    }
                }
                res.push((*x, d));
            }
            Op::NormSq(x) => {
                let s = shp(*x);
                let vx = val(*x);
                res.push((*x, (0..s.len()).map(|i| 2.0 * vx[i] * g[i / s.cols]).collect()));
            }
            Op::NormalizeRows(x) => {
                let s = shp(*x);
                let vx = val(*x);
                let mut d = vec![0.0; s.len()];
                for r in 0..s.rows {
                    let span = r * s.cols..(r + 1) * s.cols;
                    let n = vx[span.clone()].iter().map(|a| a * a).sum::<f64>().sqrt();
                    if n <= NORM_FLOOR {
                        continue;
                    }
                    let yg: f64 = out[span.clone()].iter().zip(&g[span.clone()]).map(|(a, b)| a * b).sum();
                    for i in span {
                        d[i] = (g[i] - out[i] * yg) / n;
                    }
                }
                res.push((*x, d));
            }
            Op::Cosine(u, v) => {
                let s = shp(*u);
                let (vu, vv) = (val(*u), val(*v));
                let mut du = vec![0.0; s.len()];
                let mut dv = vec![0.0; s.len()];
                for r in 0..s.rows {
                    let span = r * s.cols..(r + 1) * s.cols;
                    let (a, b) = (&vu[span.clone()], &vv[span.clone()]);
                    let (c, na, nb) = cosine_row(a, b);
                    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
                        continue;
                    }
                    for (k, i) in span.enumerate() {
                        du[i] = g[r] * (b[k] / (na * nb) - c * a[k] / (na * na));
                        dv[i] = g[r] * (a[k] / (na * nb) - c * b[k] / (nb * nb));
                    }
                }
                if rg(*u) {
                    res.push((*u, du));
                }
                if rg(*v) {
                    res.push((*v, dv));
                }
            }
            Op::Custom(inputs, func) => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| rg(v)).collect();
                let grads = func.backward(&tensors, &node.value, g, &needs);
                for ((v, gr), need) in inputs.iter().zip(grads).zip(needs) {
                    if let (Some(gr), true) = (gr, need) {
                        debug_assert_eq!(gr.len(), shp(*v).len(), "{} gradient length", func.name());
                        res.push((*v, gr));
                    }
                }
            }
        }
        res
    }
}

pub(crate) const NORM_FLOOR: f64 = 1e-12;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

fn cosine_row(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= NORM_FLOOR || nb <= NORM_FLOOR {
        return (0.0, na, nb);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb), na, nb)
}

fn reduce_broadcast(g: &[f64], bc: Broadcast, full: Shape, small: Shape) -> Vec<f64> {
    match bc {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::Row => {
            let mut acc = vec![0.0; small.cols];
            for r in 0..full.rows {
                for (a, x) in acc.iter_mut().zip(&g[r * full.cols..(r + 1) * full.cols]) {
                    *a += x;
                }
            }
            acc
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
