use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Tanh,
    Sigmoid,
    Clip01,
    Abs,
    Square,
    Reciprocal,
    Elu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    MaxAxis0 { a: usize, argmax: Vec<usize> },
    Conv2d { x: usize, k: usize, stride: usize, pad: usize },
    Upsample2x(usize),
    AvgPool3x3(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Bilinear { img: usize, coords: usize },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a differentiable computation.
///
/// Nodes are stored in creation order, which is a topological order, so
/// [`Tape::backward`] simply walks them in reverse. A tape is single-threaded;
/// independent tapes share nothing.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "Var used with a tape that did not create it");
        &self.nodes[v.index()]
    }

    fn rg(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Trainable leaf: receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached value: never accumulates gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a).value, &self.node(b).value);
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, |x, y| apply_binary(kind, x, y))?
        } else {
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let sa = broadcast_strides(ta.shape(), &shape);
            let sb = broadcast_strides(tb.shape(), &shape);
            let n = shape.iter().product();
            let mut data = vec![0.0; n];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| {
                data[o] = apply_binary(kind, da[ia], db[ib]);
            });
            Tensor::new(shape, data)?
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a.index(), b.index()), rg))
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

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let out = self.node(a).value.map(|x| apply_unary(kind, x));
        let rg = self.rg(a);
        self.push(out, Op::Unary(kind, a.index()), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// Clamp to [0, 1]. Gradient passes through on the closed interval and is
    /// zero strictly outside it.
    pub fn clip01(&mut self, a: Var) -> Var {
        self.unary(Unary::Clip01, a)
    }

    /// Absolute value, subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        self.unary(Unary::Reciprocal, a)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(Unary::Elu, a)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.node(a).value.map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a.index(), factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.node(a).value.map(|x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a.index()), rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.index()), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.node(a).value.numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Maximum over the leading axis, keeping it with extent 1. Ties pick the
    /// lowest index.
    pub fn max_axis0(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a).value;
        if t.rank() == 0 || t.shape()[0] == 0 {
            return Err(TensorError::Shape(format!("max_axis0 on shape {:?}", t.shape())));
        }
        let lead = t.shape()[0];
        let inner = t.numel() / lead;
        let d = t.data();
        let mut vals = d[..inner].to_vec();
        let mut argmax = vec![0usize; inner];
        for c in 1..lead {
            for i in 0..inner {
                let x = d[c * inner + i];
                if x > vals[i] {
                    vals[i] = x;
                    argmax[i] = c;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = 1;
        let out = Tensor::new(shape, vals)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaxAxis0 { a: a.index(), argmax }, rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(&self.node(x).value, &self.node(k).value, stride, pad)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: x.index(),
                k: k.index(),
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let out = kernels::upsample2x(&self.node(a).value)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Upsample2x(a.index()), rg))
    }

    /// 3x3 box filter with one pixel of reflection padding.
    pub fn avg_pool3x3(&mut self, a: Var) -> Result<Var> {
        let out = kernels::avg_pool3x3(&self.node(a).value)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::AvgPool3x3(a.index()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Shape(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(TensorError::Shape(format!("concat of {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.node(p).value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..][..chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.index()).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Differentiable bilinear sampling; see [`kernels::bilinear_sample`]. The
    /// in-view mask is returned as a plain tensor.
    pub fn bilinear_sample(&mut self, img: Var, coords: Var) -> Result<(Var, Tensor)> {
        let (out, mask) = kernels::bilinear_sample(&self.node(img).value, &self.node(coords).value)?;
        let rg = self.rg(img) || self.rg(coords);
        let v = self.push(
            out,
            Op::Bilinear {
                img: img.index(),
                coords: coords.index(),
            },
            rg,
        );
        Ok((v, mask))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(a).value.reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a.index()), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss);
        if root.value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let n = loss.index() + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !root.requires_grad {
            return Ok(Gradients { tape: self.id, grads });
        }
        grads[loss.index()] = Some(Tensor::full(root.value.shape(), 1.0));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (da, db) = binary_backward(*kind, ta, tb, g, needs(*a), needs(*b));
                if let Some(d) = da {
                    accumulate(grads, *a, d);
                }
                if let Some(d) = db {
                    accumulate(grads, *b, d);
                }
            }
            Op::Unary(kind, a) => {
                let x = &self.nodes[*a].value;
                let y = &node.value;
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| gv * unary_derivative(*kind, xv, yv))
                    .collect();
                accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Scale(a, f) => accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sum(a) => {
                let s = g.item();
                accumulate(grads, *a, Tensor::full(self.nodes[*a].value.shape(), s));
            }
            Op::MaxAxis0 { a, argmax } => {
                let shape = self.nodes[*a].value.shape();
                let inner = argmax.len();
                let mut d = Tensor::zeros(shape);
                let dd = d.data_mut();
                for (i, (&c, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    dd[c * inner + i] = gv;
                }
                accumulate(grads, *a, d);
            }
            Op::Conv2d { x, k, stride, pad } => {
                let (dx, dk) = kernels::conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*k].value,
                    g,
                    *stride,
                    *pad,
                    needs(*x),
                    needs(*k),
                );
                if let Some(d) = dx {
                    accumulate(grads, *x, d);
                }
                if let Some(d) = dk {
                    accumulate(grads, *k, d);
                }
            }
            Op::Upsample2x(a) => {
                accumulate(grads, *a, kernels::upsample2x_backward(self.nodes[*a].value.shape(), g))
            }
            Op::AvgPool3x3(a) => accumulate(grads, *a, kernels::avg_pool3x3_backward(g)),
            Op::Concat { parts, axis } => {
                let shape = g.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.nodes[p].value.shape();
                    let chunk = ps[*axis] * inner;
                    if needs(p) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&g.data()[o * total * inner + offset..][..chunk]);
                        }
                        accumulate(grads, p, Tensor::new(ps.to_vec(), data).unwrap());
                    }
                    offset += chunk;
                }
            }
            Op::Bilinear { img, coords } => {
                let (di, dc) = kernels::bilinear_sample_backward(
                    &self.nodes[*img].value,
                    &self.nodes[*coords].value,
                    g,
                    needs(*img),
                    needs(*coords),
                );
                if let Some(d) = di {
                    accumulate(grads, *img, d);
                }
                if let Some(d) = dc {
                    accumulate(grads, *coords, d);
                }
            }
            Op::Reshape(a) => {
                let shape = self.nodes[*a].value.shape().to_vec();
                accumulate(grads, *a, g.reshape(&shape).unwrap());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, d: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[inline]
fn apply_binary(kind: Binary, x: f64, y: f64) -> f64 {
    match kind {
        Binary::Add => x + y,
        Binary::Sub => x - y,
        Binary::Mul => x * y,
        Binary::Div => x / y,
        Binary::Max => {
            if x >= y {
                x
            } else {
                y
            }
        }
    }
}

/// Local partials (d/dx, d/dy) of a binary op.
#[inline]
fn binary_partials(kind: Binary, x: f64, y: f64) -> (f64, f64) {
    match kind {
        Binary::Add => (1.0, 1.0),
        Binary::Sub => (1.0, -1.0),
        Binary::Mul => (y, x),
        Binary::Div => (1.0 / y, -x / (y * y)),
        Binary::Max => {
            if x >= y {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

fn binary_backward(
    kind: Binary,
    ta: &Tensor,
    tb: &Tensor,
    g: &Tensor,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let mut da = want_a.then(|| vec![0.0; ta.numel()]);
    let mut db = want_b.then(|| vec![0.0; tb.numel()]);
    let (xa, xb, gd) = (ta.data(), tb.data(), g.data());
    if ta.shape() == tb.shape() {
        for i in 0..gd.len() {
            let (pa, pb) = binary_partials(kind, xa[i], xb[i]);
            if let Some(d) = da.as_mut() {
                d[i] = gd[i] * pa;
            }
            if let Some(d) = db.as_mut() {
                d[i] = gd[i] * pb;
            }
        }
    } else {
        let shape = g.shape();
        let sa = broadcast_strides(ta.shape(), shape);
        let sb = broadcast_strides(tb.shape(), shape);
        for_each_broadcast(shape, &sa, &sb, |o, ia, ib| {
            let (pa, pb) = binary_partials(kind, xa[ia], xb[ib]);
            if let Some(d) = da.as_mut() {
                d[ia] += gd[o] * pa;
            }
            if let Some(d) = db.as_mut() {
                d[ib] += gd[o] * pb;
            }
        });
    }
    (
        da.map(|v| Tensor::new(ta.shape().to_vec(), v).unwrap()),
        db.map(|v| Tensor::new(tb.shape().to_vec(), v).unwrap()),
    )
}

#[inline]
fn apply_unary(kind: Unary, x: f64) -> f64 {
    match kind {
        Unary::Neg => -x,
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Unary::Clip01 => x.clamp(0.0, 1.0),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
        Unary::Reciprocal => 1.0 / x,
        Unary::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp_m1()
            }
        }
    }
}

#[inline]
fn unary_derivative(kind: Unary, x: f64, y: f64) -> f64 {
    match kind {
        Unary::Neg => -1.0,
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Clip01 => {
            if (0.0..=1.0).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Square => 2.0 * x,
        Unary::Reciprocal => -y * y,
        Unary::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + 1.0
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a trainable leaf, if the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        assert_eq!(v.tape, self.tape, "Var from a different tape");
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        assert_eq!(v.tape, self.tape, "Var from a different tape");
        self.grads.get_mut(v.index()).and_then(|g| g.take())
    }
}
