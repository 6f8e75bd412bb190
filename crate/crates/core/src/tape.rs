//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape once in reverse and pushes vector-Jacobian products into
//! the inputs. Nodes are only ever appended after their inputs, so the tape
//! is topologically ordered by construction.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sparse::Csr;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Tanh,
    Relu,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Square,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    Scale(Var, f64),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    BroadcastRows(Var),
    Conv1dSame { input: Var, kernel: Var },
    GroupMatMul { kernel: Var, input: Var },
    SpMM { matrix: Arc<Csr>, input: Var },
    GatherRows { input: Var, index: Vec<usize> },
    AffineRows { input: Var, scale: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Split a shape around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Record a constant. It never accumulates gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Record a leaf keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.value(a).data, &self.value(b).data, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Dispatch by operation kind; binary kinds take two inputs, unary one.
    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::contract(format!(
                "{op:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match op {
            Elementwise::Add => self.binary(Binary::Add, inputs[0], inputs[1]),
            Elementwise::Sub => self.binary(Binary::Sub, inputs[0], inputs[1]),
            Elementwise::Mul => self.binary(Binary::Mul, inputs[0], inputs[1]),
            Elementwise::Div => self.binary(Binary::Div, inputs[0], inputs[1]),
            Elementwise::Sigmoid => Ok(self.unary(Unary::Sigmoid, inputs[0])),
            Elementwise::Tanh => Ok(self.unary(Unary::Tanh, inputs[0])),
            Elementwise::Relu => Ok(self.unary(Unary::Relu, inputs[0])),
            Elementwise::Square => Ok(self.unary(Unary::Square, inputs[0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    /// Equal shapes, or one side holding a single element.
    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = if ta.shape == tb.shape || tb.len() == 1 {
            ta.shape.clone()
        } else if ta.len() == 1 {
            tb.shape.clone()
        } else {
            return Err(Error::dim(format!(
                "elementwise {:?} on {:?} and {:?}",
                op, ta.shape, tb.shape
            )));
        };
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data[0] } else { t.data[i] };
        let data = (0..n).map(|i| f(at(ta, i), at(tb, i))).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(op, a, b), rg))
    }

    fn unary(&mut self, op: Unary, a: Var) -> Var {
        let t = self.value(a);
        let data = t
            .data
            .iter()
            .map(|&x| match op {
                Unary::Sigmoid => sigmoid(x),
                Unary::Tanh => x.tanh(),
                Unary::Relu => x.max(0.0),
                Unary::Square => x * x,
            })
            .collect();
        let value = Tensor::new(t.shape.clone(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Unary(op, a), rg)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape.clone(), t.data.iter().map(|x| x * c).collect()).expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        crate::tensor::check_shape(shape)?;
        let t = self.value(a);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} ({} values) into {:?}",
                t.shape,
                t.len(),
                shape
            )));
        }
        let value = Tensor::new(shape.to_vec(), t.data.clone())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Collapse everything after the leading axis: `[a, b, c] → [a, b·c]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let rest: usize = s[1..].iter().product();
        self.reshape(a, &[s[0], rest.max(1)])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut extent = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::dim(format!(
                    "concat on axis {axis}: {s:?} does not match {base:?}"
                )));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Take `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::dim(format!("slice [{start}, {end}) on axis {axis} of {s:?}")));
        }
        let (outer, ext, inner) = split_axis(&s, axis);
        let t = self.value(a);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * ext * inner;
            data.extend_from_slice(&t.data[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: f64 = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Repeat a `[1 × n]` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != 1 || m == 0 {
            return Err(Error::dim(format!("broadcast_rows of {s:?} to {m} rows")));
        }
        let n = s[1];
        let row = self.value(a).data.clone();
        let data = row.iter().copied().cycle().take(m * n).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::BroadcastRows(a), rg))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        let rows = self.shape(y)[0];
        let bb = self.broadcast_rows(b, rows)?;
        self.add(y, bb)
    }

    /// 1-D convolution of every row of `[R × D]` with a shared `[1 × Q]`
    /// kernel (cross-correlation), zero padded so the width stays `D`.
    /// The kernel is centred at tap `(Q-1)/2`.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 2 || sk[0] != 1 {
            return Err(Error::dim(format!("conv1d_same of {sx:?} with kernel {sk:?}")));
        }
        let (r, d, q) = (sx[0], sx[1], sk[1]);
        if q > d {
            return Err(Error::config(format!("kernel width {q} exceeds row width {d}")));
        }
        let pad = (q - 1) / 2;
        let (xd, kd) = (&self.value(x).data, &self.value(kernel).data);
        let mut out = vec![0.0; r * d];
        for row in 0..r {
            let src = &xd[row * d..(row + 1) * d];
            for (j, o) in out[row * d..(row + 1) * d].iter_mut().enumerate() {
                let mut acc = 0.0;
                for (tap, kv) in kd.iter().enumerate() {
                    let pos = j as isize + tap as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < d {
                        acc += kv * src[pos as usize];
                    }
                }
                *o = acc;
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Tensor::new(vec![r, d], out)?, Op::Conv1dSame { input: x, kernel }, rg))
    }

    /// Left-multiply each consecutive block of `N` rows of `x` (`[R·N × D]`)
    /// by the shared `kernel` (`[A × N]`), giving `[R·A × D]`.
    pub fn group_matmul(&mut self, kernel: Var, x: Var) -> Result<Var> {
        let (sk, sx) = (self.shape(kernel).to_vec(), self.shape(x).to_vec());
        if sk.len() != 2 || sx.len() != 2 || sx[0] % sk[1] != 0 {
            return Err(Error::dim(format!("group_matmul of kernel {sk:?} with input {sx:?}")));
        }
        let (a, n, d) = (sk[0], sk[1], sx[1]);
        let groups = sx[0] / n;
        let (kd, xd) = (&self.value(kernel).data, &self.value(x).data);
        let mut out = Vec::with_capacity(groups * a * d);
        for g in 0..groups {
            out.extend(matmul_raw(kd, &xd[g * n * d..(g + 1) * n * d], a, n, d));
        }
        let rg = self.rg(kernel) || self.rg(x);
        Ok(self.push(
            Tensor::new(vec![groups * a, d], out)?,
            Op::GroupMatMul { kernel, input: x },
            rg,
        ))
    }

    /// Constant sparse matrix times dense `[cols × F]`.
    pub fn spmm(&mut self, matrix: Arc<Csr>, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != matrix.cols {
            return Err(Error::dim(format!(
                "sparse {}x{} times {s:?}",
                matrix.rows, matrix.cols
            )));
        }
        let out = matrix.matmul_dense(&self.value(x).data, s[1]);
        let rg = self.rg(x);
        let shape = vec![matrix.rows, s[1]];
        Ok(self.push(Tensor::new(shape, out)?, Op::SpMM { matrix, input: x }, rg))
    }

    /// Select rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index.is_empty() || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::dim(format!("gather_rows from {s:?}")));
        }
        let w = s[1];
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), w], data)?,
            Op::GatherRows {
                input: x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row constant affine map `y[r, :] = x[r, :] · scale[r] + shift[r]`.
    pub fn affine_rows(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || scale.len() != s[0] || shift.len() != s[0] {
            return Err(Error::dim(format!("affine_rows on {s:?} with {} scales", scale.len())));
        }
        let w = s[1];
        let data = self
            .value(x)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i / w] + shift[i / w])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(s, data)?,
            Op::AffineRows {
                input: x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    /// Populate gradients of every node that depends on a trainable leaf.
    ///
    /// May be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; record a fresh tape",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.push_input_grads(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn push_input_grads(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].value.requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if ta.requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for c in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * tb.data[c * n + j];
                            }
                            da[r * k + c] = s;
                        }
                    }
                    acc(*a, da);
                }
                if tb.requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..k {
                            let av = ta.data[r * k + c];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut db[c * n..(c + 1) * n];
                            for (d, gv) in dst.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += av * gv;
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor, i: usize| if t.len() == 1 { t.data[0] } else { t.data[i] };
                let n = out.len();
                let reduce = |t: &Tensor, per: Vec<f64>| {
                    if t.len() == 1 && n != 1 {
                        vec![per.iter().sum()]
                    } else {
                        per
                    }
                };
                if ta.requires_grad {
                    let per: Vec<f64> = (0..n)
                        .map(|i| match op {
                            Binary::Add | Binary::Sub => g[i],
                            Binary::Mul => g[i] * at(tb, i),
                            Binary::Div => g[i] / at(tb, i),
                        })
                        .collect();
                    acc(*a, reduce(ta, per));
                }
                if tb.requires_grad {
                    let per: Vec<f64> = (0..n)
                        .map(|i| match op {
                            Binary::Add => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * at(ta, i),
                            Binary::Div => {
                                let y = at(tb, i);
                                -g[i] * at(ta, i) / (y * y)
                            }
                        })
                        .collect();
                    acc(*b, reduce(tb, per));
                }
            }
            Op::Unary(op, a) => {
                let x = &self.value(*a).data;
                let d = g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| {
                        gv * match op {
                            Unary::Sigmoid => out.data[i] * (1.0 - out.data[i]),
                            Unary::Tanh => 1.0 - out.data[i] * out.data[i],
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * x[i],
                        }
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let (outer, ext, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let e = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * e * inner);
                    for o in 0..outer {
                        let base = o * ext * inner + offset * inner;
                        part.extend_from_slice(&g[base..base + e * inner]);
                    }
                    acc(v, part);
                    offset += e;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let (outer, ext, inner) = split_axis(s, *axis);
                let len = out.shape[*axis];
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = o * ext * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(src);
                }
                acc(*input, d);
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0] / n as f64; n]);
            }
            Op::BroadcastRows(a) => {
                let n = out.shape[1];
                let mut d = vec![0.0; n];
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
                acc(*a, d);
            }
            Op::Conv1dSame { input, kernel } => {
                let (tx, tk) = (self.value(*input), self.value(*kernel));
                let (r, d) = (tx.shape[0], tx.shape[1]);
                let q = tk.shape[1];
                let pad = (q - 1) / 2;
                let mut dx = vec![0.0; r * d];
                let mut dk = vec![0.0; q];
                for row in 0..r {
                    for j in 0..d {
                        let gv = g[row * d + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for tap in 0..q {
                            let pos = j as isize + tap as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < d {
                                let p = row * d + pos as usize;
                                dx[p] += gv * tk.data[tap];
                                dk[tap] += gv * tx.data[p];
                            }
                        }
                    }
                }
                acc(*input, dx);
                acc(*kernel, dk);
            }
            Op::GroupMatMul { kernel, input } => {
                let (tk, tx) = (self.value(*kernel), self.value(*input));
                let (a, n, d) = (tk.shape[0], tk.shape[1], tx.shape[1]);
                let groups = tx.shape[0] / n;
                let mut dk = vec![0.0; a * n];
                let mut dx = vec![0.0; groups * n * d];
                for grp in 0..groups {
                    let gb = &g[grp * a * d..(grp + 1) * a * d];
                    let xb = &tx.data[grp * n * d..(grp + 1) * n * d];
                    for ai in 0..a {
                        for ni in 0..n {
                            let kv = tk.data[ai * n + ni];
                            let mut s = 0.0;
                            for di in 0..d {
                                let gv = gb[ai * d + di];
                                s += gv * xb[ni * d + di];
                                dx[grp * n * d + ni * d + di] += kv * gv;
                            }
                            dk[ai * n + ni] += s;
                        }
                    }
                }
                acc(*kernel, dk);
                acc(*input, dx);
            }
            Op::SpMM { matrix, input } => {
                let w = out.shape[1];
                acc(*input, matrix.transpose_matmul_dense(g, w));
            }
            Op::GatherRows { input, index } => {
                let s = self.shape(*input);
                let w = s[1];
                let mut d = vec![0.0; s[0] * w];
                for (k, &i) in index.iter().enumerate() {
                    for c in 0..w {
                        d[i * w + c] += g[k * w + c];
                    }
                }
                acc(*input, d);
            }
            Op::AffineRows { input, scale } => {
                let w = out.shape[1];
                acc(*input, g.iter().enumerate().map(|(i, v)| v * scale[i / w]).collect());
            }
        }
    }
}

/// Plain row-major `[m×k] · [k×n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (d, bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += av * bv;
            }
        }
    }
    out
}
