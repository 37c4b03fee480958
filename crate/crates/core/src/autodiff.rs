//! Define-by-run reverse-mode automatic differentiation on dense `f64`
//! tensors.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! parameters (gradients tracked) or constants; every op appends a node and
//! returns a [`Var`] handle. [`Graph::backward`] walks the nodes in reverse
//! creation order, which is a valid topological order because parents are
//! always created before children.
//!
//! Binary elementwise ops broadcast NumPy-style: shapes are aligned on their
//! trailing dimensions and extents of 1 stretch. Non-differentiable points
//! (`relu` and `abs` at 0, `clamp` at its bounds) take subgradient 0.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("NaN guard in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major array. A shape of `[]` is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err("new", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("new", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a `[rows, cols]` matrix from row vectors.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Column `j` of a 2-D tensor.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let c = self.cols();
        self.data.iter().skip(j).step_by(c).copied().collect()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Abs(Var),
    Softplus(Var),
    Affine(Var, f64),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Broadcast(Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradient tape. Nodes are append-only.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Flat index into `in_shape` for each flat index of `out_shape`.
fn broadcast_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n_out: usize = out_shape.iter().product();
    let offset = out_shape.len() - in_shape.len();
    let mut in_strides = vec![0; out_shape.len()];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let mut map = Vec::with_capacity(n_out);
    let mut coord = vec![0usize; out_shape.len()];
    let mut idx = 0usize;
    for _ in 0..n_out {
        map.push(idx);
        for d in (0..out_shape.len()).rev() {
            coord[d] += 1;
            idx += in_strides[d];
            if coord[d] < out_shape[d] {
                break;
            }
            idx -= in_strides[d] * coord[d];
            coord[d] = 0;
        }
    }
    map
}

fn expand<'a>(t: &'a Tensor, out_shape: &[usize]) -> Cow<'a, [f64]> {
    if t.shape == out_shape {
        return Cow::Borrowed(&t.data);
    }
    let n_out: usize = out_shape.iter().product();
    if t.data.len() == 1 {
        return Cow::Owned(vec![t.data[0]; n_out]);
    }
    // trailing-suffix fast path, e.g. a bias row added to a batch
    if out_shape.ends_with(&t.shape) {
        let m = t.data.len();
        return Cow::Owned((0..n_out).map(|i| t.data[i % m]).collect());
    }
    let map = broadcast_map(&t.shape, out_shape);
    Cow::Owned(map.into_iter().map(|i| t.data[i]).collect())
}

/// Sums a gradient of `out_shape` back down to `in_shape`.
fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return grad.to_vec();
    }
    let n_in: usize = in_shape.iter().product();
    let mut acc = vec![0.0; n_in];
    if n_in == 1 {
        acc[0] = grad.iter().sum();
    } else if out_shape.ends_with(in_shape) {
        for (i, g) in grad.iter().enumerate() {
            acc[i % n_in] += g;
        }
    } else {
        for (g, j) in grad.iter().zip(broadcast_map(in_shape, out_shape)) {
            acc[j] += g;
        }
    }
    acc
}

/// `(outer, extent, inner)` for iterating one axis of a shape.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `C = op(A) · op(B)` through `matrixmultiply`, with optional transposes
/// expressed as strides. `A` is stored `[ra, ca]`, `B` is `[rb, cb]`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], ra: usize, ca: usize, ta: bool, b: &[f64], rb: usize, cb: usize, tb: bool) -> Vec<f64> {
    let (m, k, rsa, csa) = if ta { (ca, ra, 1, ca) } else { (ra, ca, ca, 1) };
    let (k2, n, rsb, csb) = if tb { (cb, rb, 1, cb) } else { (rb, cb, cb, 1) };
    debug_assert_eq!(k, k2);
    let mut c = vec![0.0; m * n];
    // SAFETY: slices have the lengths implied by the shapes and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| f(x)).collect(),
        };
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(&ta.shape, &tb.shape)
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {:?} with {:?}", ta.shape, tb.shape)))?;
        let (da, db) = (expand(ta, &shape), expand(tb, &shape));
        let data = da.iter().zip(db.iter()).map(|(&x, &y)| f(x, y)).collect();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor { shape, data }, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", format!("{:?} · {:?}", ta.shape, tb.shape)));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = gemm(&ta.data, m, k, false, &tb.data, k, n, false);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::Matmul(a, b), tracked))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Mean(a), tracked)
    }

    /// Sums out one axis, dropping it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if axis >= t.shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} of {:?}", t.shape)));
        }
        let (outer, ext, inner) = axis_split(&t.shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &t.data[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape.clone();
        shape.remove(axis);
        let tracked = self.tracked(a);
        Ok(self.push(Tensor { shape, data }, Op::SumAxis(a, axis), tracked))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.unary(a, Op::Exp(a), f64::exp);
        if !self.nodes[v.0].value.is_finite() {
            return Err(TensorError::Domain {
                op: "exp",
                detail: "overflow".into(),
            });
        }
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(x) = self.nodes[a.0].value.data.iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("argument {x}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.nodes[first.0].value.shape.clone();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].value.shape;
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let tracked = parts.iter().any(|p| self.tracked(*p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis), tracked))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        if axis >= t.shape.len() || len == 0 || start + len > t.shape[axis] {
            return Err(shape_err("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape)));
        }
        let (outer, ext, inner) = axis_split(&t.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&t.data[base..base + len * inner]);
        }
        let mut shape = t.shape.clone();
        shape[axis] = len;
        let tracked = self.tracked(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice(a, axis, start), tracked))
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = &self.nodes[a.0].value;
        match broadcast_shape(&t.shape, shape) {
            Some(s) if s == shape => {}
            _ => return Err(shape_err("broadcast", format!("{:?} -> {shape:?}", t.shape))),
        }
        let data = expand(t, shape).into_owned();
        let tracked = self.tracked(a);
        Ok(self.push(
            Tensor {
                shape: shape.to_vec(),
                data,
            },
            Op::Broadcast(a),
            tracked,
        ))
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = &self.nodes[root.0].value;
        if rv.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            let send = |v: Var, contrib: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.0].tracked {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let elementwise = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
                val(v).data.iter().zip(&out.data).zip(&g).map(|((&x, &y), &g)| f(x, y, g)).collect()
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    send(*a, reduce_to(&g, &out.shape, &val(*a).shape), &mut grads);
                    send(*b, reduce_to(&g, &out.shape, &val(*b).shape), &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*a, reduce_to(&g, &out.shape, &val(*a).shape), &mut grads);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    send(*b, reduce_to(&neg, &out.shape, &val(*b).shape), &mut grads);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if self.nodes[a.0].tracked {
                        let eb = expand(tb, &out.shape);
                        let ga: Vec<f64> = g.iter().zip(eb.iter()).map(|(g, y)| g * y).collect();
                        send(*a, reduce_to(&ga, &out.shape, &ta.shape), &mut grads);
                    }
                    if self.nodes[b.0].tracked {
                        let ea = expand(ta, &out.shape);
                        let gb: Vec<f64> = g.iter().zip(ea.iter()).map(|(g, x)| g * x).collect();
                        send(*b, reduce_to(&gb, &out.shape, &tb.shape), &mut grads);
                    }
                }
                Op::Matmul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                    if self.nodes[a.0].tracked {
                        send(*a, gemm(&g, m, n, false, &tb.data, k, n, true), &mut grads);
                    }
                    if self.nodes[b.0].tracked {
                        send(*b, gemm(&ta.data, m, k, true, &g, m, n, false), &mut grads);
                    }
                }
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).data.len()], &mut grads),
                Op::Mean(a) => {
                    let n = val(*a).data.len();
                    send(*a, vec![g[0] / n as f64; n], &mut grads);
                }
                Op::SumAxis(a, axis) => {
                    let (outer, ext, inner) = axis_split(&val(*a).shape, *axis);
                    let mut ga = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        for _ in 0..ext {
                            ga.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::Relu(a) => send(*a, elementwise(*a, &|x, _, g| if x > 0.0 { g } else { 0.0 }), &mut grads),
                Op::Tanh(a) => send(*a, elementwise(*a, &|_, y, g| g * (1.0 - y * y)), &mut grads),
                Op::Sigmoid(a) => send(*a, elementwise(*a, &|_, y, g| g * y * (1.0 - y)), &mut grads),
                Op::Softplus(a) => send(*a, elementwise(*a, &|x, _, g| g * sigmoid(x)), &mut grads),
                Op::Exp(a) => send(*a, elementwise(*a, &|_, y, g| g * y), &mut grads),
                Op::Log(a) => send(*a, elementwise(*a, &|x, _, g| g / x), &mut grads),
                Op::Square(a) => send(*a, elementwise(*a, &|x, _, g| 2.0 * x * g), &mut grads),
                Op::Abs(a) => send(
                    *a,
                    elementwise(*a, &|x, _, g| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                    &mut grads,
                ),
                Op::Affine(a, s) => send(*a, g.iter().map(|g| g * s).collect(), &mut grads),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(*a, elementwise(*a, &|x, _, g| if x > lo && x < hi { g } else { 0.0 }), &mut grads)
                }
                Op::Concat(parts, axis) => {
                    let (outer, total, inner) = axis_split(&out.shape, *axis);
                    let mut offset = 0;
                    for p in parts {
                        let ext = val(*p).shape[*axis];
                        let mut gp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + ext * inner]);
                        }
                        send(*p, gp, &mut grads);
                        offset += ext;
                    }
                }
                Op::Slice(a, axis, start) => {
                    let (outer, ext, inner) = axis_split(&val(*a).shape, *axis);
                    let len = out.shape[*axis];
                    let mut ga = vec![0.0; outer * ext * inner];
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    send(*a, ga, &mut grads);
                }
                Op::Broadcast(a) => send(*a, reduce_to(&g, &out.shape, &val(*a).shape), &mut grads),
            }
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf)).map(|data| Tensor {
                    shape: self.nodes[i].value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of the root with respect to every tracked leaf it depends on.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` if the root does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        Self::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Self::Sgd { lr } | Self::Adam { lr, .. } => lr,
        }
    }
}

/// First-order optimizer with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(&p.shape)).collect();
        let (m, v) = match config {
            OptimizerConfig::Sgd { .. } => (Vec::new(), Vec::new()),
            OptimizerConfig::Adam { .. } => (zeros(), zeros()),
        };
        Self { config, t: 0, m, v }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(shape_err("optimizer", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape != g.shape {
                return Err(shape_err("optimizer", format!("param {:?} vs grad {:?}", p.shape, g.shape)));
            }
        }
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.data.iter_mut().zip(&g.data).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    return Err(shape_err("optimizer", "state does not match parameter count"));
                }
                let c1 = 1.0 - beta1.powf(self.t as f64);
                let c2 = 1.0 - beta2.powf(self.t as f64);
                for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Floor on the denominator of the per-entry relative error in
/// [`check_gradients`], so entries whose true gradient is ~0 are compared
/// in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, floor)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().zip(inputs).map(|(v, t)| grads.get_or_zeros(*v, &t.shape)).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let mut num = Tensor::zeros(&inputs[k].shape);
        for i in 0..inputs[k].data.len() {
            let x0 = inputs[k].data[i];
            work[k].data[i] = x0 + h;
            let up = eval(&work)?;
            work[k].data[i] = x0 - h;
            let down = eval(&work)?;
            work[k].data[i] = x0;
            num.data[i] = (up - down) / (2.0 * h);
        }
        numeric.push(num);
    }

    let mut worst = (0.0, 0, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (i, (&a, &n)) in a.data.iter().zip(&n.data).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR);
            if rel > worst.0 || rel.is_nan() {
                worst = (if rel.is_nan() { f64::INFINITY } else { rel }, k, i);
            }
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_input: worst.1,
        worst_index: worst.2,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    fn rand_tensor(rng: &mut Prng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn add_zeros_and_sum_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2, 3]));
        let c = g.add(a, b).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
        let s = g.sum(c);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(gr.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matmul_bilinear_gradient() {
        let mut rng = Prng::new(1);
        let (u, w) = (rand_tensor(&mut rng, &[1, 4]), rand_tensor(&mut rng, &[4, 1]));
        let mut g = Graph::new();
        let a = g.param(u.clone());
        let b = g.param(w.clone());
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(a).unwrap().data(), w.data());
        assert_eq!(gr.get(b).unwrap().data(), u.data());
    }

    #[test]
    fn single_param_root() {
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(3.0));
        let gr = g.backward(a).unwrap();
        assert_eq!(gr.get(a).unwrap().item(), 1.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(a), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn independent_subgraphs_add() {
        let mut rng = Prng::new(2);
        let (x, y) = (rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3]));
        let build = |g: &mut Graph, a: Var, b: Var, which: u8| {
            let ta = g.tanh(a);
            let fa = g.sum(ta);
            let sb = g.square(b);
            let fb = g.mean(sb);
            match which {
                0 => fa,
                1 => fb,
                _ => g.add(fa, fb).unwrap(),
            }
        };
        let grads = |which| {
            let mut g = Graph::new();
            let (a, b) = (g.param(x.clone()), g.param(y.clone()));
            let r = build(&mut g, a, b, which);
            let gr = g.backward(r).unwrap();
            (gr.get_or_zeros(a, &[3]), gr.get_or_zeros(b, &[3]))
        };
        let (a0, _) = grads(0);
        let (_, b1) = grads(1);
        let (a2, b2) = grads(2);
        assert_eq!(a0, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn broadcasting_rules() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::new(vec![3], vec![10., 20., 30.]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11., 22., 33., 14., 25., 36.]);
        let col = g.constant(Tensor::new(vec![2, 1], vec![2., 3.]).unwrap());
        let d = g.mul(a, col).unwrap();
        assert_eq!(g.value(d).data(), &[2., 4., 6., 12., 15., 18.]);
        let bad = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, bad).is_err());
    }

    #[test]
    fn log_nan_guard() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(a), Err(TensorError::Domain { op: "log", .. })));
        let b = g.param(Tensor::scalar(1000.0));
        assert!(g.exp(b).is_err());
    }

    #[track_caller]
    fn assert_grad(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>) {
        let r = check_gradients(inputs, 1e-5, f).unwrap();
        assert!(r.max_rel_error < 1e-4, "rel error {}", r.max_rel_error);
    }

    #[test]
    fn kernel_gradients() {
        let mut rng = Prng::new(5);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let row = rand_tensor(&mut rng, &[4]);
        let w = rand_tensor(&mut rng, &[4, 2]);
        let pos = Tensor::from_fn(&[3, 4], |_| rng.uniform_range(0.5, 2.0));
        // keep away from the kinks of relu/abs/clamp
        let away = Tensor::from_fn(&[3, 4], |i| if i % 2 == 0 { 0.13 + 0.11 * i as f64 } else { -0.21 - 0.09 * i as f64 });

        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let c = g.add(v[0], v[1])?;
            let d = g.square(c);
            Ok(g.sum(d))
        });
        assert_grad(&[a.clone(), row.clone()], |g, v| {
            let c = g.sub(v[0], v[1])?;
            let d = g.tanh(c);
            Ok(g.mean(d))
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let c = g.mul(v[0], v[1])?;
            Ok(g.sum(c))
        });
        assert_grad(&[a.clone(), w.clone()], |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let d = g.sigmoid(c);
            Ok(g.sum(d))
        });
        assert_grad(&[a.clone()], |g, v| {
            let c = g.sum_axis(v[0], 1)?;
            let d = g.square(c);
            Ok(g.sum(d))
        });
        assert_grad(&[a.clone()], |g, v| {
            let c = g.sum_axis(v[0], 0)?;
            let d = g.exp(c)?;
            Ok(g.sum(d))
        });
        assert_grad(&[pos.clone()], |g, v| {
            let c = g.log(v[0])?;
            Ok(g.sum(c))
        });
        assert_grad(&[away.clone()], |g, v| {
            let r = g.relu(v[0]);
            let s = g.abs(v[0]);
            let c = g.clamp(v[0], -0.5, 0.5);
            let t = g.add(r, s)?;
            let t = g.mul(t, c)?;
            Ok(g.sum(t))
        });
        assert_grad(&[a.clone()], |g, v| {
            let s = g.softplus(v[0]);
            let s = g.affine(s, 1.7, 0.3);
            Ok(g.mean(s))
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let s = g.slice(c, 1, 2, 4)?;
            let t = g.tanh(s);
            let t = g.square(t);
            Ok(g.sum(t))
        });
        assert_grad(&[a.clone(), b.clone()], |g, v| {
            let c = g.concat(&[v[0], v[1]], 0)?;
            let s = g.slice(c, 0, 1, 3)?;
            let t = g.sigmoid(s);
            Ok(g.sum(t))
        });
        assert_grad(&[row.clone(), a.clone()], |g, v| {
            let c = g.broadcast(v[0], &[3, 4])?;
            let d = g.mul(c, v[1])?;
            let d = g.square(d);
            Ok(g.mean(d))
        });
    }

    #[test]
    fn sgd_and_zero_gradient() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.5, 0.25]).unwrap()];
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 1.0 }, &p);
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data(), &[0.5, -2.25]);

        let before = p.clone();
        let mut adam = Optimizer::new(OptimizerConfig::adam(0.1), &p);
        adam.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p, before);
        assert!(adam.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }

    #[test]
    fn adam_quadratic_bowl() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), &p);
        let mut steps = 0;
        while p[0].item().abs() >= 1e-3 {
            let grad = Tensor::scalar(2.0 * p[0].item());
            opt.step(&mut p, &[grad]).unwrap();
            steps += 1;
            assert!(steps <= 500, "did not converge, p = {}", p[0].item());
        }
    }
}
