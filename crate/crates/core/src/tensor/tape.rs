use std::sync::atomic::{AtomicU64, Ordering};

use super::{gemm, split_axis, Result, Tensor, TensorError, MIN_DIVISOR, NORM_EPS};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Sigmoid,
    LeakyRelu(f64),
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    Reshape(Var),
    Sum {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Max {
        input: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    Norm {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Cross3(Var, Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
        width: usize,
    },
    TakeAlongRows {
        input: Var,
        indices: Vec<usize>,
        cols: usize,
        k: usize,
    },
    Slice {
        input: Var,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        end: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Chamfer {
        a: Var,
        b: Var,
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
    EdgePool {
        center: Var,
        nbr: Var,
        gamma: Var,
        beta: Var,
        indices: Vec<usize>,
        k: usize,
        slope: f64,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        argmax: Vec<u32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Eagerly evaluated computation record.
///
/// Every op computes its value immediately and appends a node. Nodes only
/// reference earlier nodes, so the record is topologically ordered by
/// construction. A tape is single-threaded; independent tapes may run on
/// separate threads.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    min_kink_gap: f64,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf created with `requires_grad = true`.
    ///
    /// Leaves the loss does not depend on get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = Vec::with_capacity(nd);
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        let d = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
        out.push(d);
    }
    Ok(out)
}

/// Strides of `shape` expressed in the coordinates of the broadcast shape
/// `out`; broadcast dimensions get stride zero.
fn broadcast_strides(out: &[usize], shape: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let od = i + nd - shape.len();
        strides[od] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the
/// broadcast of `a` and `b` onto `out`.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if a == out && b == out {
        for o in 0..total {
            f(o, o, o);
        }
        return;
    }
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let sa = broadcast_strides(out, a);
    let sb = broadcast_strides(out, b);
    let last = out[nd - 1];
    let (la, lb) = (sa[nd - 1], sb[nd - 1]);
    let rows = if last == 0 { 0 } else { total / last };
    let mut idx = vec![0usize; nd - 1];
    let (mut base_a, mut base_b) = (0usize, 0usize);
    for r in 0..rows {
        let o = r * last;
        for t in 0..last {
            f(o + t, base_a + t * la, base_b + t * lb);
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base_a += sa[d];
            base_b += sb[d];
            if idx[d] < out[d] {
                break;
            }
            base_a -= sa[d] * out[d];
            base_b -= sb[d] * out[d];
            idx[d] = 0;
        }
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

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            min_kink_gap: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance to a non-differentiable point seen so far: the
    /// top-two gap of max reductions and nearest-neighbor selections, the
    /// magnitude of leaky ReLU inputs and gaps passed to [`Tape::note_gap`].
    pub fn min_kink_gap(&self) -> f64 {
        self.min_kink_gap
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.tape, self.id, "variable from another tape");
        &self.nodes[var.index].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    fn check(&self, var: Var) -> Result<&Tensor> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(TensorError::Detached);
        }
        Ok(&self.nodes[var.index].value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        self.push(value, op, requires_grad)
    }

    /// Records a margin to a non-differentiable point found outside the
    /// tape, such as the boundary of a nearest-neighbor selection.
    pub fn note_gap(&mut self, gap: f64) {
        if gap < self.min_kink_gap {
            self.min_kink_gap = gap;
        }
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let input = self.check(x)?;
        let value = match kind {
            Unary::Neg => input.map(|v| -v),
            Unary::Scale(c) => input.map(|v| c * v),
            Unary::AddScalar(c) => input.map(|v| v + c),
            Unary::Exp => input.map(f64::exp),
            Unary::Sigmoid => input.map(sigmoid),
            Unary::LeakyRelu(slope) => input.map(|v| if v > 0.0 { v } else { slope * v }),
            Unary::Square => input.map(|v| v * v),
        };
        if let Unary::LeakyRelu(_) = kind {
            let gap = input.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            self.note_gap(gap);
        }
        Ok(self.push_op(value, Op::Unary(kind, x), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let out_shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        if kind == Binary::Div {
            if let Some(&v) = tb.data().iter().find(|v| v.abs() < MIN_DIVISOR) {
                return Err(TensorError::DivisionByZero { value: v });
            }
        }
        let total: usize = out_shape.iter().product();
        let mut out = vec![0.0; total];
        let (da, db) = (ta.data(), tb.data());
        match kind {
            Binary::Add => for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, i, j| {
                out[o] = da[i] + db[j]
            }),
            Binary::Sub => for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, i, j| {
                out[o] = da[i] - db[j]
            }),
            Binary::Mul => for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, i, j| {
                out[o] = da[i] * db[j]
            }),
            Binary::Div => for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |o, i, j| {
                out[o] = da[i] / db[j]
            }),
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push_op(value, Op::Binary(kind, a, b), &[a, b]))
    }

    /// Broadcasting `a + b` (trailing-dimension rules).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Broadcasting `a / b`; fails if any divisor is smaller than
    /// [`MIN_DIVISOR`] in magnitude.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    // ---- linear algebra ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched product `a[B x m x k] * b[B x k x n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.ndim() != 3
            || tb.ndim() != 3
            || ta.shape()[0] != tb.shape()[0]
            || ta.shape()[2] != tb.shape()[1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (batch, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            gemm(
                m,
                k,
                n,
                &ta.data()[t * m * k..(t + 1) * m * k],
                false,
                &tb.data()[t * k * n..(t + 1) * k * n],
                false,
                &mut out[t * m * n..(t + 1) * m * n],
                0.0,
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push_op(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        if t.ndim() != 2 {
            return Err(TensorError::InvalidAxis {
                axis: 1,
                ndim: t.ndim(),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        Ok(self.push_op(value, Op::Transpose { input: x, rows, cols }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(x)?.clone().reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(x), &[x]))
    }

    // ---- reductions --------------------------------------------------

    fn reduce_shape(&self, x: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let t = self.check(x)?;
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        Ok((shape, outer, len, inner))
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape(x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Sum {
                input: x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape(x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Mean {
                input: x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Maximum along `axis`. The gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape(x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut second = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    let v = d[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        second[slot] = out[slot];
                        out[slot] = v;
                        argmax[slot] = base + i;
                    } else if v > second[slot] {
                        second[slot] = v;
                    }
                }
            }
        }
        if len > 1 {
            let gap = out
                .iter()
                .zip(&second)
                .map(|(a, b)| a - b)
                .fold(f64::INFINITY, f64::min);
            self.note_gap(gap);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(value, Op::Max { input: x, argmax }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.check(x)?.data().iter().sum();
        Ok(self.push_op(Tensor::scalar(total), Op::SumAll(x), &[x]))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.check(x)?.len();
        if n == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm along `axis`, removing it. The backward pass uses
    /// `x / (|x| + NORM_EPS)`, so a zero vector gets a zero gradient.
    pub fn norm_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, outer, len, inner) = self.reduce_shape(x, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i] * d[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Norm {
                input: x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    /// Per-row Euclidean norm of an `r x 3` tensor.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        if t.ndim() != 2 || t.shape()[1] != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "row_l2_norm",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 3],
            });
        }
        self.norm_axis(x, 1)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.check(x)?;
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let shape = t.shape().to_vec();
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[at(l)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Softmax {
                input: x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    // ---- geometry ----------------------------------------------------

    /// Cross product over the last axis, which must have extent 3.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() || ta.shape().last() != Some(&3) {
            return Err(TensorError::ShapeMismatch {
                op: "cross3",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta
            .data()
            .chunks_exact(3)
            .zip(tb.data().chunks_exact(3))
            .flat_map(|(p, q)| cross(p, q))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push_op(value, Op::Cross3(a, b), &[a, b]))
    }

    /// Symmetric Chamfer distance between point sets `a[n x D]` and
    /// `b[m x D]`: mean squared distance from each point to its nearest
    /// neighbor in the other set, summed over both directions. Ties pick
    /// the lowest index.
    pub fn chamfer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "chamfer",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (n, m, dim) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
        if n == 0 || m == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let (da, db) = (ta.data(), tb.data());
        let sq = |i: usize, j: usize| -> f64 {
            (0..dim)
                .map(|c| {
                    let t = da[i * dim + c] - db[j * dim + c];
                    t * t
                })
                .sum()
        };
        let mut best_a = vec![(f64::INFINITY, f64::INFINITY, 0usize); n];
        let mut best_b = vec![(f64::INFINITY, f64::INFINITY, 0usize); m];
        for i in 0..n {
            for j in 0..m {
                let d = sq(i, j);
                let ba = &mut best_a[i];
                if d < ba.0 {
                    *ba = (d, ba.0, j);
                } else if d < ba.1 {
                    ba.1 = d;
                }
                let bb = &mut best_b[j];
                if d < bb.0 {
                    *bb = (d, bb.0, i);
                } else if d < bb.1 {
                    bb.1 = d;
                }
            }
        }
        let term_a: f64 = best_a.iter().map(|b| b.0).sum::<f64>() / n as f64;
        let term_b: f64 = best_b.iter().map(|b| b.0).sum::<f64>() / m as f64;
        let gap = best_a
            .iter()
            .chain(&best_b)
            .map(|b| b.1 - b.0)
            .fold(f64::INFINITY, f64::min);
        self.note_gap(gap);
        let nn_ab = best_a.iter().map(|b| b.2).collect();
        let nn_ba = best_b.iter().map(|b| b.2).collect();
        Ok(self.push_op(
            Tensor::scalar(term_a + term_b),
            Op::Chamfer { a, b, nn_ab, nn_ba },
            &[a, b],
        ))
    }

    // ---- indexing ----------------------------------------------------

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::EmptyReduction)?;
        let base_shape = self.check(*first)?.shape().to_vec();
        let (outer, _, inner) = split_axis(&base_shape, axis)?;
        let mut chunks = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.check(v)?.shape();
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            chunks.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let width: usize = chunks.iter().sum();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            for (&v, &c) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.value(v).data()[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total_axis;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                chunks,
            },
            inputs,
        ))
    }

    /// Selects rows (entries along axis 0) by index; repeated indices are
    /// allowed and their gradients accumulate.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.check(x)?;
        if t.ndim() == 0 {
            return Err(TensorError::InvalidAxis { axis: 0, ndim: 0 });
        }
        let rows = t.shape()[0];
        let width = t.len() / rows.max(1);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    index: i,
                    extent: rows,
                });
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
                width,
            },
            &[x],
        ))
    }

    /// For a matrix `x[r x c]` and `k` column indices per row (row-major,
    /// length `r*k`), returns `out[i, t] = x[i, indices[i*k + t]]`.
    pub fn take_along_rows(&mut self, x: Var, indices: &[usize], k: usize) -> Result<Var> {
        let t = self.check(x)?;
        if t.ndim() != 2 || indices.len() != t.shape()[0] * k {
            return Err(TensorError::ShapeMismatch {
                op: "take_along_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![indices.len()],
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            for &c in &indices[r * k..(r + 1) * k] {
                if c >= cols {
                    return Err(TensorError::IndexOutOfBounds {
                        index: c,
                        extent: cols,
                    });
                }
                out.push(t.data()[r * cols + c]);
            }
        }
        let value = Tensor::new(vec![rows, k], out)?;
        Ok(self.push_op(
            value,
            Op::TakeAlongRows {
                input: x,
                indices: indices.to_vec(),
                cols,
                k,
            },
            &[x],
        ))
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.check(x)?;
        let (outer, len, inner) = split_axis(t.shape(), axis)?;
        if start > end || end > len {
            return Err(TensorError::IndexOutOfBounds {
                index: end,
                extent: len,
            });
        }
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        Ok(self.push_op(
            value,
            Op::Slice {
                input: x,
                outer,
                len,
                inner,
                start,
                end,
            },
            &[x],
        ))
    }

    // ---- normalization -----------------------------------------------

    /// Per-column normalization of `x[r x c]` with the batch statistics of
    /// this call, followed by the affine map `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        if tx.ndim() != 2 || tg.shape() != [tx.shape()[1]] || tb.shape() != [tx.shape()[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
        if rows == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let d = tx.data();
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(&d[r * cols..(r + 1) * cols]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let t = d[r * cols + c] - mean[c];
                var[c] += t * t;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / rows as f64 + eps).sqrt())
            .collect();
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        let (g, b) = (tg.data(), tb.data());
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                xhat[i] = (d[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push_op(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Fused edge aggregation over a neighbor table.
    ///
    /// With `e[i, t] = center[i] + nbr[indices[i*k + t]]` for `center` and
    /// `nbr` of shape `[n x c]`, computes `max_t leaky_relu(batch_norm(e))`
    /// where the normalization statistics run over all `n*k` edges. Equal to
    /// composing `gather`, `add`, `batch_norm`, `leaky_relu` and `max_axis`,
    /// without materializing the edge tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn edge_pool(
        &mut self,
        center: Var,
        nbr: Var,
        indices: &[usize],
        k: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
        slope: f64,
    ) -> Result<Var> {
        let (tc, tn) = (self.check(center)?, self.check(nbr)?);
        let (tg, tb) = (self.check(gamma)?, self.check(beta)?);
        if tc.ndim() != 2 || tn.ndim() != 2 || tc.shape()[1] != tn.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "edge_pool",
                lhs: tc.shape().to_vec(),
                rhs: tn.shape().to_vec(),
            });
        }
        let (n, c) = (tc.shape()[0], tc.shape()[1]);
        if tg.shape() != [c] || tb.shape() != [c] || k == 0 || indices.len() != n * k {
            return Err(TensorError::ShapeMismatch {
                op: "edge_pool",
                lhs: vec![n, k, c],
                rhs: vec![indices.len()],
            });
        }
        let m = tn.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&j| j >= m) {
            return Err(TensorError::IndexOutOfBounds { index: bad, extent: m });
        }
        let (cd, nd, gd, bd) = (tc.data(), tn.data(), tg.data(), tb.data());
        let edges = (n * k) as f64;
        let mut mean = vec![0.0; c];
        for i in 0..n {
            let ci = &cd[i * c..(i + 1) * c];
            for &j in &indices[i * k..(i + 1) * k] {
                let nj = &nd[j * c..(j + 1) * c];
                for ch in 0..c {
                    mean[ch] += ci[ch] + nj[ch];
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= edges);
        let mut var = vec![0.0; c];
        for i in 0..n {
            let ci = &cd[i * c..(i + 1) * c];
            for &j in &indices[i * k..(i + 1) * k] {
                let nj = &nd[j * c..(j + 1) * c];
                for ch in 0..c {
                    let t = ci[ch] + nj[ch] - mean[ch];
                    var[ch] += t * t;
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / edges + eps).sqrt()).collect();

        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut second = vec![f64::NEG_INFINITY; n * c];
        let mut pre = vec![0.0; n * c];
        let mut argmax = vec![0u32; n * c];
        for i in 0..n {
            let ci = &cd[i * c..(i + 1) * c];
            let row = i * c;
            for (t, &j) in indices[i * k..(i + 1) * k].iter().enumerate() {
                let nj = &nd[j * c..(j + 1) * c];
                for ch in 0..c {
                    let y = gd[ch] * (ci[ch] + nj[ch] - mean[ch]) * inv_std[ch] + bd[ch];
                    let z = if y > 0.0 { y } else { slope * y };
                    let slot = row + ch;
                    if z > out[slot] {
                        second[slot] = out[slot];
                        out[slot] = z;
                        pre[slot] = y;
                        argmax[slot] = t as u32;
                    } else if z > second[slot] {
                        second[slot] = z;
                    }
                }
            }
        }
        // only the selected edges carry gradient through the activation
        let mut gap = pre.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        if k > 1 {
            gap = out
                .iter()
                .zip(&second)
                .map(|(a, b)| a - b)
                .fold(gap, f64::min);
        }
        self.note_gap(gap);
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push_op(
            value,
            Op::EdgePool {
                center,
                nbr,
                gamma,
                beta,
                indices: indices.to_vec(),
                k,
                slope,
                mean,
                inv_std,
                argmax,
            },
            &[center, nbr, gamma, beta],
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if lt.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        grads[loss.index] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; count];

        for idx in (0..=loss.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && leaf_grads[idx].is_none() {
                leaf_grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
        })
    }

    fn propagate(&self, node: &Node, g_owned: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.index].requires_grad;
        let val = |v: Var| &nodes[v.index].value;
        // pass-through cases hand the incoming buffer on without copying
        match node.op {
            Op::Reshape(x) => {
                if wants(x) {
                    accumulate_owned(grads, x, g_owned);
                }
                return;
            }
            Op::Binary(kind @ (Binary::Add | Binary::Sub), a, b)
                if val(a).shape() == node.value.shape() && val(b).shape() == node.value.shape() =>
            {
                if wants(b) {
                    let gb = buffer(grads, b, g_owned.len());
                    if kind == Binary::Add {
                        gb.iter_mut().zip(&g_owned).for_each(|(x, g)| *x += g);
                    } else {
                        gb.iter_mut().zip(&g_owned).for_each(|(x, g)| *x -= g);
                    }
                }
                if wants(a) {
                    accumulate_owned(grads, a, g_owned);
                }
                return;
            }
            _ => {}
        }
        let g: &[f64] = &g_owned;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let x = *x;
                if !wants(x) {
                    return;
                }
                let xd = val(x).data();
                let yd = out.data();
                let gx = buffer(grads, x, xd.len());
                match *kind {
                    Unary::Neg => gx.iter_mut().zip(g).for_each(|(a, g)| *a -= g),
                    Unary::Scale(c) => gx.iter_mut().zip(g).for_each(|(a, g)| *a += c * g),
                    Unary::AddScalar(_) => gx.iter_mut().zip(g).for_each(|(a, g)| *a += g),
                    Unary::Exp => {
                        for i in 0..g.len() {
                            gx[i] += g[i] * yd[i];
                        }
                    }
                    Unary::Sigmoid => {
                        for i in 0..g.len() {
                            gx[i] += g[i] * yd[i] * (1.0 - yd[i]);
                        }
                    }
                    Unary::LeakyRelu(slope) => {
                        for i in 0..g.len() {
                            gx[i] += if xd[i] > 0.0 { g[i] } else { slope * g[i] };
                        }
                    }
                    Unary::Square => {
                        for i in 0..g.len() {
                            gx[i] += 2.0 * xd[i] * g[i];
                        }
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                let (ta, tb) = (val(a), val(b));
                let (da, db) = (ta.data(), tb.data());
                let out_shape = out.shape();
                if wants(a) {
                    let ga = buffer(grads, a, da.len());
                    match kind {
                        Binary::Add | Binary::Sub => {
                            for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, i, _| {
                                ga[i] += g[o]
                            })
                        }
                        Binary::Mul => {
                            for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, i, j| {
                                ga[i] += g[o] * db[j]
                            })
                        }
                        Binary::Div => {
                            for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, i, j| {
                                ga[i] += g[o] / db[j]
                            })
                        }
                    }
                }
                if wants(b) {
                    let gb = buffer(grads, b, db.len());
                    match kind {
                        Binary::Add => {
                            for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, _, j| {
                                gb[j] += g[o]
                            })
                        }
                        Binary::Sub => {
                            for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, _, j| {
                                gb[j] -= g[o]
                            })
                        }
                        Binary::Mul => {
                            for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, i, j| {
                                gb[j] += g[o] * da[i]
                            })
                        }
                        Binary::Div => {
                            for_each_broadcast(out_shape, ta.shape(), tb.shape(), |o, i, j| {
                                gb[j] -= g[o] * da[i] / (db[j] * db[j])
                            })
                        }
                    }
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let bd = val(b).data();
                    let ga = buffer(grads, a, m * k);
                    gemm(m, n, k, g, false, bd, true, ga, 1.0);
                }
                if wants(b) {
                    let ad = val(a).data();
                    let gb = buffer(grads, b, k * n);
                    gemm(k, m, n, ad, true, g, false, gb, 1.0);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                if wants(a) {
                    let bd = val(b).data();
                    let ga = buffer(grads, a, batch * m * k);
                    for t in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &bd[t * k * n..(t + 1) * k * n],
                            true,
                            &mut ga[t * m * k..(t + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if wants(b) {
                    let ad = val(a).data();
                    let gb = buffer(grads, b, batch * k * n);
                    for t in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &ad[t * m * k..(t + 1) * m * k],
                            true,
                            &g[t * m * n..(t + 1) * m * n],
                            false,
                            &mut gb[t * k * n..(t + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            &Op::Transpose { input, rows, cols } => {
                if wants(input) {
                    let gx = buffer(grads, input, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if wants(x) {
                    let gx = buffer(grads, x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
            &Op::Sum {
                input,
                outer,
                len,
                inner,
            }
            | &Op::Mean {
                input,
                outer,
                len,
                inner,
            } => {
                if wants(input) {
                    let factor = if matches!(node.op, Op::Mean { .. }) {
                        1.0 / len as f64
                    } else {
                        1.0
                    };
                    let gx = buffer(grads, input, outer * len * inner);
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] += factor * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Max { input, argmax } => {
                if wants(*input) {
                    let n = val(*input).len();
                    let gx = buffer(grads, *input, n);
                    for (slot, &src) in argmax.iter().enumerate() {
                        gx[src] += g[slot];
                    }
                }
            }
            &Op::SumAll(x) => {
                if wants(x) {
                    let n = val(x).len();
                    let gx = buffer(grads, x, n);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            &Op::Norm {
                input,
                outer,
                len,
                inner,
            } => {
                if wants(input) {
                    let xd = val(input).data();
                    let yd = out.data();
                    let gx = buffer(grads, input, xd.len());
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                let slot = o * inner + i;
                                gx[base + i] += g[slot] * xd[base + i] / (yd[slot] + NORM_EPS);
                            }
                        }
                    }
                }
            }
            &Op::Softmax {
                input,
                outer,
                len,
                inner,
            } => {
                if wants(input) {
                    let yd = out.data();
                    let gx = buffer(grads, input, yd.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * yd[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += yd[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::Cross3(a, b) => {
                let (da, db) = (val(a).data(), val(b).data());
                if wants(a) {
                    let ga = buffer(grads, a, da.len());
                    for r in 0..da.len() / 3 {
                        let c = cross(&db[3 * r..3 * r + 3], &g[3 * r..3 * r + 3]);
                        for t in 0..3 {
                            ga[3 * r + t] += c[t];
                        }
                    }
                }
                if wants(b) {
                    let gb = buffer(grads, b, db.len());
                    for r in 0..db.len() / 3 {
                        let c = cross(&g[3 * r..3 * r + 3], &da[3 * r..3 * r + 3]);
                        for t in 0..3 {
                            gb[3 * r + t] += c[t];
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let width: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(chunks) {
                    if wants(v) {
                        let gv = buffer(grads, v, outer * c);
                        for o in 0..*outer {
                            let src = &g[o * width + offset..o * width + offset + c];
                            for (a, s) in gv[o * c..(o + 1) * c].iter_mut().zip(src) {
                                *a += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Gather {
                input,
                indices,
                width,
            } => {
                if wants(*input) {
                    let n = val(*input).len();
                    let gx = buffer(grads, *input, n);
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        for (a, s) in gx[i * width..(i + 1) * width].iter_mut().zip(src) {
                            *a += s;
                        }
                    }
                }
            }
            Op::TakeAlongRows {
                input,
                indices,
                cols,
                k,
            } => {
                if wants(*input) {
                    let n = val(*input).len();
                    let gx = buffer(grads, *input, n);
                    for (slot, &c) in indices.iter().enumerate() {
                        let r = slot / k;
                        gx[r * cols + c] += g[slot];
                    }
                }
            }
            &Op::Slice {
                input,
                outer,
                len,
                inner,
                start,
                end,
            } => {
                if wants(input) {
                    let gx = buffer(grads, input, outer * len * inner);
                    let w = (end - start) * inner;
                    for o in 0..outer {
                        let dst = &mut gx[(o * len + start) * inner..(o * len + end) * inner];
                        for (a, s) in dst.iter_mut().zip(&g[o * w..(o + 1) * w]) {
                            *a += s;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = inv_std.len();
                let rows = xhat.len() / cols;
                let gd = val(*gamma).data();
                let mut sum_g = vec![0.0; cols];
                let mut sum_gx = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
                }
                if wants(*x) {
                    let gx = buffer(grads, *x, rows * cols);
                    let inv_rows = 1.0 / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            gx[i] += gd[c]
                                * inv_std[c]
                                * (g[i] - inv_rows * sum_g[c] - xhat[i] * inv_rows * sum_gx[c]);
                        }
                    }
                }
                if wants(*gamma) {
                    let gg = buffer(grads, *gamma, cols);
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, s)| *a += s);
                }
                if wants(*beta) {
                    let gb = buffer(grads, *beta, cols);
                    gb.iter_mut().zip(&sum_g).for_each(|(a, s)| *a += s);
                }
            }
            Op::EdgePool {
                center,
                nbr,
                gamma,
                beta,
                indices,
                k,
                slope,
                mean,
                inv_std,
                argmax,
            } => {
                let (center, nbr, gamma, beta, k) = (*center, *nbr, *gamma, *beta, *k);
                let (cd, nd, gd, bd) = (val(center).data(), val(nbr).data(), val(gamma).data(), val(beta).data());
                let c = inv_std.len();
                let n = cd.len() / c;
                let edges = (n * k) as f64;
                // gradient at each selected edge, before normalization
                let mut dy = vec![0.0; n * c];
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let slot = i * c + ch;
                        let j = indices[i * k + argmax[slot] as usize];
                        let xh = (cd[slot] + nd[j * c + ch] - mean[ch]) * inv_std[ch];
                        let y = gd[ch] * xh + bd[ch];
                        let d = g[slot] * if y > 0.0 { 1.0 } else { *slope };
                        dy[slot] = d;
                        sum_g[ch] += d;
                        sum_gx[ch] += d * xh;
                    }
                }
                if wants(gamma) {
                    let gg = buffer(grads, gamma, c);
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, s)| *a += s);
                }
                if wants(beta) {
                    let gb = buffer(grads, beta, c);
                    gb.iter_mut().zip(&sum_g).for_each(|(a, s)| *a += s);
                }
                let (wc, wn) = (wants(center), wants(nbr));
                if !(wc || wn) {
                    return;
                }
                let scale: Vec<f64> = (0..c).map(|ch| gd[ch] * inv_std[ch]).collect();
                let a: Vec<f64> = sum_g.iter().map(|s| s / edges).collect();
                let b: Vec<f64> = sum_gx.iter().map(|s| s / edges).collect();
                let mut gc = vec![0.0; n * c];
                let mut gn = vec![0.0; nd.len()];
                for i in 0..n {
                    let ci = &cd[i * c..(i + 1) * c];
                    for (t, &j) in indices[i * k..(i + 1) * k].iter().enumerate() {
                        let nj = &nd[j * c..(j + 1) * c];
                        for ch in 0..c {
                            let slot = i * c + ch;
                            let xh = (ci[ch] + nj[ch] - mean[ch]) * inv_std[ch];
                            let sel = if argmax[slot] as usize == t { dy[slot] } else { 0.0 };
                            let de = scale[ch] * (sel - a[ch] - xh * b[ch]);
                            gc[slot] += de;
                            gn[j * c + ch] += de;
                        }
                    }
                }
                if wc {
                    let buf = buffer(grads, center, gc.len());
                    buf.iter_mut().zip(&gc).for_each(|(x, d)| *x += d);
                }
                if wn {
                    let buf = buffer(grads, nbr, gn.len());
                    buf.iter_mut().zip(&gn).for_each(|(x, d)| *x += d);
                }
            }
            Op::Chamfer { a, b, nn_ab, nn_ba } => {
                let (ta, tb) = (val(*a), val(*b));
                let dim = ta.shape()[1];
                let (n, m) = (nn_ab.len(), nn_ba.len());
                let (da, db) = (ta.data(), tb.data());
                let mut ga = vec![0.0; da.len()];
                let mut gb = vec![0.0; db.len()];
                let sa = 2.0 * g[0] / n as f64;
                for (i, &j) in nn_ab.iter().enumerate() {
                    for c in 0..dim {
                        let t = sa * (da[i * dim + c] - db[j * dim + c]);
                        ga[i * dim + c] += t;
                        gb[j * dim + c] -= t;
                    }
                }
                let sb = 2.0 * g[0] / m as f64;
                for (j, &i) in nn_ba.iter().enumerate() {
                    for c in 0..dim {
                        let t = sb * (db[j * dim + c] - da[i * dim + c]);
                        gb[j * dim + c] += t;
                        ga[i * dim + c] -= t;
                    }
                }
                if wants(*a) {
                    let buf = buffer(grads, *a, da.len());
                    buf.iter_mut().zip(&ga).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let buf = buffer(grads, *b, db.len());
                    buf.iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
}

fn buffer(grads: &mut [Option<Vec<f64>>], var: Var, len: usize) -> &mut Vec<f64> {
    grads[var.index].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], var: Var, g: Vec<f64>) {
    match &mut grads[var.index] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(x, g)| *x += g),
        slot @ None => *slot = Some(g),
    }
}

fn cross(p: &[f64], q: &[f64]) -> [f64; 3] {
    [
        p[1] * q[2] - p[2] * q[1],
        p[2] * q[0] - p[0] * q[2],
        p[0] * q[1] - p[1] * q[0],
    ]
}
