//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Values
//! are computed eagerly, so [`Tape::value`] is available immediately;
//! [`Tape::backward`] then walks the records in reverse and accumulates
//! adjoints. Records are appended in evaluation order, which makes the tape
//! topologically sorted by construction.
//!
//! ```
//! use sapo::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = tape.leaf(Tensor::scalar(3.0));
//! let f = tape.mul(x, y).unwrap();
//! let grads = tape.backward(f).unwrap();
//! assert_eq!(grads.wrt(x), vec![3.0]);
//! assert_eq!(grads.wrt(y), vec![2.0]);
//! ```
//!
//! The primitive set is deliberately small: it covers the two language
//! models in [`crate::model`] and the preference losses, nothing more.

mod check;

pub use check::{grad_check, relative_error, GradCheckReport};

use crate::error::{Result, SapoError};
use crate::math;

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(SapoError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SapoError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// One-dimensional tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector tensor must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    fn rows_cols(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Detach,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    AddRow(Var, Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Reshape(Var),
    Slice { src: Var, start: usize },
    Tanh(Var),
    LogSoftmax(Var),
    Pick { src: Var, cols: Vec<usize> },
    SegmentSum { src: Var, lens: Vec<usize> },
    Sum(Var),
    Mean(Var),
    LogSigmoid(Var),
    Log1mexp(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when no path connects it to the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, zeros when unreachable.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.sizes[var.0]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// First element of the value; the whole value for scalars.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Same value, gradient flow stopped.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(SapoError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map(x, |v| -v, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    /// Elementwise `ln σ(x)`, stable for any finite input.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.map(x, math::log_sigmoid, Op::LogSigmoid(x))
    }

    /// Elementwise `ln(1 - e^x)`; every element must be strictly negative.
    pub fn log1mexp(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.data(x).iter().find(|&&v| !(v < 0.0)) {
            return Err(SapoError::Domain(format!(
                "log1mexp needs x < 0, got {bad}"
            )));
        }
        Ok(self.map(x, math::log1mexp, Op::Log1mexp(x)))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let err = || SapoError::Shape {
            op: "matmul",
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        };
        let (n, k) = self.value(a).rows_cols().ok_or_else(err)?;
        let (k2, m) = self.value(b).rows_cols().ok_or_else(err)?;
        if k != k2 {
            return Err(err());
        }
        let out = matmul_nn(self.data(a), self.data(b), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            Op::Matmul(a, b),
            rg,
        ))
    }

    /// Adds a `[m]` vector to every row of a `[n, m]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (n, m) = match (self.value(x).rows_cols(), self.shape(row)) {
            (Some((n, m)), [m2]) if m == *m2 => (n, m),
            _ => {
                return Err(SapoError::Shape {
                    op: "add_row",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(row).to_vec(),
                })
            }
        };
        let r = self.data(row);
        let mut data = self.data(x).to_vec();
        for i in 0..n {
            for (d, &b) in data[i * m..(i + 1) * m].iter_mut().zip(r) {
                *d += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::AddRow(x, row),
            rg,
        ))
    }

    /// Embedding lookup: rows `ids` of a `[v, d]` table, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).rows_cols().ok_or_else(|| SapoError::Shape {
            op: "gather_rows",
            lhs: self.shape(table).to_vec(),
            rhs: vec![ids.len()],
        })?;
        if ids.is_empty() {
            return Err(SapoError::Contract("gather_rows needs at least one id".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(SapoError::Contract(format!(
                "gather_rows index {bad} out of range for {v} rows"
            )));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
            },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(SapoError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Reshape(x),
            rg,
        ))
    }

    /// Contiguous flat range `[start, start + prod(shape))` reinterpreted as `shape`.
    pub fn slice(&mut self, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || start + n > self.value(x).len() {
            return Err(SapoError::Shape {
                op: "slice",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x)[start..start + n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Slice { src: x, start },
            rg,
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let m = *self.shape(x).last().ok_or_else(|| SapoError::Shape {
            op: "log_softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(m) {
            math::log_softmax_in_place(row);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape, data }, Op::LogSoftmax(x), rg))
    }

    /// Picks one column per row of a `[n, m]` matrix, giving `[n]`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, m) = match self.value(x).rows_cols() {
            Some((n, m)) if n == cols.len() => (n, m),
            _ => {
                return Err(SapoError::Shape {
                    op: "pick",
                    lhs: self.shape(x).to_vec(),
                    rhs: vec![cols.len()],
                })
            }
        };
        if let Some(&bad) = cols.iter().find(|&&c| c >= m) {
            return Err(SapoError::Contract(format!(
                "pick column {bad} out of range for width {m}"
            )));
        }
        let src = self.data(x);
        let data = (0..n).map(|i| src[i * m + cols[i]]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![n],
                data,
            },
            Op::Pick {
                src: x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Sums consecutive runs of a vector: `lens` partitions it into segments.
    pub fn segment_sum(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let total: usize = lens.iter().sum();
        if self.shape(x).len() != 1 || total != self.value(x).len() || lens.is_empty() || lens.contains(&0) {
            return Err(SapoError::Shape {
                op: "segment_sum",
                lhs: self.shape(x).to_vec(),
                rhs: lens.to_vec(),
            });
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &len in lens {
            data.push(src[at..at + len].iter().sum());
            at += len;
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor {
                shape: vec![lens.len()],
                data,
            },
            Op::SegmentSum {
                src: x,
                lens: lens.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(SapoError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, sizes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Accumulates into the adjoint of `v` when `v` takes part in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for (d, &x) in s.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Neg(x) => acc(*x, &mut |s| {
                for (d, &x) in s.iter_mut().zip(g) {
                    *d -= x;
                }
            }),
            Op::Scale(x, c) => acc(*x, &mut |s| {
                for (d, &x) in s.iter_mut().zip(g) {
                    *d += c * x;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Matmul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (n, k) = av.rows_cols().expect("matmul lhs is 2-d");
                let m = bv.shape[1];
                acc(*a, &mut |s| matmul_nt_acc(g, &bv.data, s, n, m, k));
                acc(*b, &mut |s| matmul_tn_acc(&av.data, g, s, n, k, m));
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |s| add_into(s, g));
                let m = nodes[row.0].value.len();
                acc(*row, &mut |s| {
                    for chunk in g.chunks(m) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = nodes[table.0].value.shape[1];
                acc(*table, &mut |s| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::Slice { src, start } => acc(*src, &mut |s| {
                add_into(&mut s[*start..*start + g.len()], g);
            }),
            Op::Tanh(x) => {
                let y = &node.value.data;
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value.data;
                let m = *node.value.shape.last().expect("non-scalar");
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..m {
                            srow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Pick { src, cols } => {
                let m = nodes[src.0].value.shape[1];
                acc(*src, &mut |s| {
                    for (i, &c) in cols.iter().enumerate() {
                        s[i * m + c] += g[i];
                    }
                });
            }
            Op::SegmentSum { src, lens } => acc(*src, &mut |s| {
                let mut at = 0;
                for (k, &len) in lens.iter().enumerate() {
                    for d in &mut s[at..at + len] {
                        *d += g[k];
                    }
                    at += len;
                }
            }),
            Op::Sum(x) => acc(*x, &mut |s| {
                for d in s.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| {
                    for d in s.iter_mut() {
                        *d += g[0] / n;
                    }
                })
            }
            Op::LogSigmoid(x) => {
                let xv = &nodes[x.0].value.data;
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * math::sigmoid(-xv[i]);
                    }
                });
            }
            Op::Log1mexp(x) => {
                let xv = &nodes[x.0].value.data;
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * math::log1mexp_grad(xv[i]);
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `a[n,k] · b[k,m]`.
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `dst[n,k] += g[n,m] · bᵀ` where `b` is `[k,m]`.
fn matmul_nt_acc(g: &[f64], b: &[f64], dst: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            dst[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `dst[k,m] += aᵀ · g` where `a` is `[n,k]` and `g` is `[n,m]`.
fn matmul_tn_acc(a: &[f64], g: &[f64], dst: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (d, &gv) in dst[p * m..(p + 1) * m].iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}
