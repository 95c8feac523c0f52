//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, so the node list is already topologically sorted. [`Var::backward`]
//! walks it once in reverse and accumulates vector-Jacobian products.
//!
//! ```
//! use rewardbench::numcore::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = x.mul(x).unwrap().sum().unwrap(); // Σ x²
//! let grads = y.backward().unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Ref, RefCell};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Norms at or below this floor are rejected by normalizing ops.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    /// Tanh approximation of GELU.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRowBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Act(usize, Activation),
    Exp(usize),
    Log(usize),
    Hinge(usize),
    Normalize(usize),
    Norm(usize),
    SumAxis(usize, usize),
    Sum(usize),
    LogSumExp(usize, usize),
    Gather(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<(usize, usize)>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Var::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.id].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient with respect to `v`, zeros if nothing flowed into it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a differentiable leaf.
    pub fn var(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(
        &self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        let rg = inputs.iter().any(|&i| self.rg(i));
        Ok(self.push(value, op, rg))
    }

    fn backward_from(&self, root: usize) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| nodes[i].value.data();
            let needs = |i: usize| nodes[i].requires_grad;
            let acc = |grads: &mut Vec<Option<Vec<f64>>>, i: usize, f: &dyn Fn(&mut [f64])| {
                let slot = grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[*a].value.dims2()?;
                    let (_, n) = nodes[*b].value.dims2()?;
                    if needs(*a) {
                        let bv = val(*b);
                        // dA = dC · Bᵀ
                        acc(&mut grads, *a, &|s| {
                            gemm(m, n, k, &g, (n as isize, 1), bv, (1, n as isize), s, 1.0)
                        });
                    }
                    if needs(*b) {
                        let av = val(*a);
                        // dB = Aᵀ · dC
                        acc(&mut grads, *b, &|s| {
                            gemm(k, m, n, av, (1, k as isize), &g, (n as isize, 1), s, 1.0)
                        });
                    }
                }
                Op::Add(a, b) => {
                    for i in [*a, *b] {
                        if needs(i) {
                            acc(&mut grads, i, &|s| {
                                s.iter_mut().zip(&g).for_each(|(s, g)| *s += g)
                            });
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        acc(&mut grads, *a, &|s| {
                            s.iter_mut().zip(&g).for_each(|(s, g)| *s += g)
                        });
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, &|s| {
                            s.iter_mut().zip(&g).for_each(|(s, g)| *s -= g)
                        });
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let bv = val(*b);
                        acc(&mut grads, *a, &|s| {
                            for ((s, g), y) in s.iter_mut().zip(&g).zip(bv) {
                                *s += g * y;
                            }
                        });
                    }
                    if needs(*b) {
                        let av = val(*a);
                        acc(&mut grads, *b, &|s| {
                            for ((s, g), x) in s.iter_mut().zip(&g).zip(av) {
                                *s += g * x;
                            }
                        });
                    }
                }
                Op::AddRowBias(x, b) => {
                    if needs(*x) {
                        acc(&mut grads, *x, &|s| {
                            s.iter_mut().zip(&g).for_each(|(s, g)| *s += g)
                        });
                    }
                    if needs(*b) {
                        let n = nodes[*b].value.numel();
                        acc(&mut grads, *b, &|s| {
                            for row in g.chunks(n) {
                                s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                            }
                        });
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, &|s| {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += c * g)
                    });
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    acc(&mut grads, *a, &|s| {
                        s.iter_mut().zip(&g).for_each(|(s, g)| *s += g)
                    });
                }
                Op::Act(a, kind) => {
                    let xv = val(*a);
                    acc(&mut grads, *a, &|s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(xv) {
                            *s += g * kind.derivative(*x);
                        }
                    });
                }
                Op::Exp(a) => {
                    let yv = node.value.data();
                    acc(&mut grads, *a, &|s| {
                        for ((s, g), y) in s.iter_mut().zip(&g).zip(yv) {
                            *s += g * y;
                        }
                    });
                }
                Op::Log(a) => {
                    let xv = val(*a);
                    acc(&mut grads, *a, &|s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(xv) {
                            *s += g / x;
                        }
                    });
                }
                Op::Hinge(a) => {
                    let xv = val(*a);
                    acc(&mut grads, *a, &|s| {
                        for ((s, g), x) in s.iter_mut().zip(&g).zip(xv) {
                            if *x > 0.0 {
                                *s += g;
                            }
                        }
                    });
                }
                Op::Normalize(a) => {
                    let xv = val(*a);
                    let yv = node.value.data();
                    let (_, c) = last_dim(node.value.shape());
                    acc(&mut grads, *a, &|s| {
                        for ((sr, gr), (xr, yr)) in s
                            .chunks_mut(c)
                            .zip(g.chunks(c))
                            .zip(xv.chunks(c).zip(yv.chunks(c)))
                        {
                            let norm = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                            let gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                            for ((s, g), y) in sr.iter_mut().zip(gr).zip(yr) {
                                *s += (g - y * gy) / norm;
                            }
                        }
                    });
                }
                Op::Norm(a) => {
                    let xv = val(*a);
                    let yv = node.value.data();
                    let c = nodes[*a].value.shape().last().copied().unwrap_or(1);
                    acc(&mut grads, *a, &|s| {
                        for (r, (sr, xr)) in s.chunks_mut(c).zip(xv.chunks(c)).enumerate() {
                            let norm = yv[r];
                            if norm > 0.0 {
                                for (s, x) in sr.iter_mut().zip(xr) {
                                    *s += g[r] * x / norm;
                                }
                            }
                        }
                    });
                }
                Op::SumAxis(a, axis) => {
                    let (outer, len, inner) = axis_split(nodes[*a].value.shape(), *axis);
                    acc(&mut grads, *a, &|s| {
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    s[(o * len + l) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc(&mut grads, *a, &|s| s.iter_mut().for_each(|s| *s += g0));
                }
                Op::LogSumExp(a, axis) => {
                    let xv = val(*a);
                    let yv = node.value.data();
                    let (outer, len, inner) = axis_split(nodes[*a].value.shape(), *axis);
                    acc(&mut grads, *a, &|s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let oi = o * inner + i;
                                for l in 0..len {
                                    let idx = (o * len + l) * inner + i;
                                    s[idx] += g[oi] * (xv[idx] - yv[oi]).exp();
                                }
                            }
                        }
                    });
                }
                Op::Gather(a, idx) => {
                    acc(&mut grads, *a, &|s| {
                        for (g, &i) in g.iter().zip(idx) {
                            s[i] += g;
                        }
                    });
                }
                Op::GatherRows(a, idx) => {
                    let (_, c) = last_dim(nodes[*a].value.shape());
                    acc(&mut grads, *a, &|s| {
                        for (gr, &r) in g.chunks(c).zip(idx) {
                            s[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(s, g)| *s += g);
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut off = 0;
                    for &(pid, w) in parts {
                        if needs(pid) {
                            acc(&mut grads, pid, &|s| {
                                for (sr, gr) in s.chunks_mut(w).zip(g.chunks(total)) {
                                    sr.iter_mut()
                                        .zip(&gr[off..off + w])
                                        .for_each(|(s, g)| *s += g);
                                }
                            });
                        }
                        off += w;
                    }
                }
            }
            // leaves keep their gradient
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward_from(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (m, k, n, out) = {
            let a = self.value();
            let b = rhs.value();
            let (m, k) = a
                .dims2()
                .map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
            let (k2, n) = b
                .dims2()
                .map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
            if k != k2 {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                a.data(),
                (k as isize, 1),
                b.data(),
                (n as isize, 1),
                &mut out,
                0.0,
            );
            (m, k, n, out)
        };
        let _ = k;
        self.tape.record(
            "matmul",
            Tensor::new(vec![m, n], out)?,
            Op::MatMul(self.id, rhs.id),
            &[self.id, rhs.id],
        )
    }

    fn zip_same(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let out = {
            let a = self.value();
            let b = rhs.value();
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| f(*x, *y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape.record(name, out, op, &[self.id, rhs.id])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.zip_same(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_row_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let out = {
            let x = self.value();
            let b = bias.value();
            let (_, n) = x
                .dims2()
                .map_err(|_| Error::shape("add_row_bias", x.shape(), b.shape()))?;
            if b.shape() != [n] {
                return Err(Error::shape("add_row_bias", x.shape(), b.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(r, b)| *r += b);
            }
            Tensor::new(x.shape().to_vec(), data)?
        };
        self.tape.record(
            "add_row_bias",
            out,
            Op::AddRowBias(self.id, bias.id),
            &[self.id, bias.id],
        )
    }

    fn map(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())?
        };
        self.tape.record(name, out, op, &[self.id])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.map("scale", |x| c * x, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.map("add_scalar", |x| x + c, Op::AddScalar(self.id))
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        self.map("activation", |x| kind.apply(x), Op::Act(self.id, kind))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.map("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|x| *x <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        self.map("ln", f64::ln, Op::Log(self.id))
    }

    /// `max(0, x)`; subgradient 0 at the kink.
    pub fn hinge(self) -> Result<Var<'t>> {
        self.map("hinge", |x| x.max(0.0), Op::Hinge(self.id))
    }

    /// Divides each row (the whole vector for rank 1) by its L2 norm.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (_, c) = last_dim(a.shape());
            if c == 0 {
                return Err(Error::Degenerate("normalize over an empty axis".into()));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(c) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm <= NORM_EPS {
                    return Err(Error::Degenerate(format!(
                        "norm {norm:e} at or below {NORM_EPS:e}"
                    )));
                }
                row.iter_mut().for_each(|x| *x /= norm);
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        self.tape
            .record("l2_normalize", out, Op::Normalize(self.id), &[self.id])
    }

    /// L2 norm of each row; gradient taken as zero at the origin.
    pub fn norm(self) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let shape = a.shape();
            let (_, c) = last_dim(shape);
            let data: Vec<f64> = a
                .data()
                .chunks(c.max(1))
                .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            let out_shape = if shape.len() <= 1 {
                vec![]
            } else {
                shape[..shape.len() - 1].to_vec()
            };
            Tensor::new(out_shape, data)?
        };
        self.tape.record("norm", out, Op::Norm(self.id), &[self.id])
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(Error::Domain(format!(
                    "axis {axis} out of range for {shape:?}"
                )));
            }
            let (outer, len, inner) = axis_split(shape, axis);
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += a.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut s = shape.to_vec();
            s.remove(axis);
            Tensor::new(s, data)?
        };
        self.tape
            .record("sum_axis", out, Op::SumAxis(self.id, axis), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s: f64 = self.value().data().iter().sum();
        self.tape
            .record("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel();
        if n == 0 {
            return Err(Error::Domain("mean of empty tensor".into()));
        }
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Row-wise dot product of two same-shape matrices (or vectors).
    pub fn dot_rows(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let p = self.mul(rhs)?;
        let nd = p.value().ndim();
        if nd == 0 {
            return Ok(p);
        }
        p.sum_axis(nd - 1)
    }

    /// `log Σ exp(x)` along `axis`, shifted by the axis maximum.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(Error::Domain(format!(
                    "axis {axis} out of range for {shape:?}"
                )));
            }
            let (outer, len, inner) = axis_split(shape, axis);
            if len == 0 {
                return Err(Error::Domain("logsumexp over an empty axis".into()));
            }
            let x = a.data();
            let mut data = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| x[(o * len + l) * inner + i];
                    let m = (0..len).map(at).fold(f64::NEG_INFINITY, f64::max);
                    let s: f64 = (0..len).map(|l| (at(l) - m).exp()).sum();
                    data[o * inner + i] = m + s.ln();
                }
            }
            let mut s = shape.to_vec();
            s.remove(axis);
            Tensor::new(s, data)?
        };
        self.tape
            .record("logsumexp", out, Op::LogSumExp(self.id, axis), &[self.id])
    }

    /// Flat gather: `out[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(self, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let n = a.numel();
            if let Some(bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::Range(format!("gather index {bad} >= {n}")));
            }
            let data = idx.iter().map(|&i| a.data()[i]).collect();
            Tensor::new(shape, data)?
        };
        self.tape
            .record("gather", out, Op::Gather(self.id, idx), &[self.id])
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let (r, c) = a.dims2()?;
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(Error::Range(format!("row {i} >= {r}")));
                }
                data.extend_from_slice(a.row(i));
            }
            Tensor::new(vec![rows.len(), c], data)?
        };
        self.tape.record(
            "gather_rows",
            out,
            Op::GatherRows(self.id, rows.to_vec()),
            &[self.id],
        )
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape
            .record("reshape", out, Op::Reshape(self.id), &[self.id])
    }
}

/// Stacks vectors `[m]` and matrices `[m×w]` side by side into `[m×Σw]`.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let mut spec = Vec::with_capacity(parts.len());
    let rows = {
        let v = first.value();
        v.shape().first().copied().unwrap_or(1)
    };
    for p in parts {
        first.same_tape(p);
        let v = p.value();
        let w = match v.shape() {
            [m] if *m == rows => 1,
            [m, w] if *m == rows => *w,
            s => return Err(Error::shape("concat_cols", &[rows], s)),
        };
        spec.push((p.id, w));
    }
    let total: usize = spec.iter().map(|s| s.1).sum();
    let mut data = vec![0.0; rows * total];
    let mut off = 0;
    for (p, &(_, w)) in parts.iter().zip(&spec) {
        let v = p.value();
        for r in 0..rows {
            data[r * total + off..r * total + off + w]
                .copy_from_slice(&v.data()[r * w..(r + 1) * w]);
        }
        off += w;
    }
    let ids: Vec<usize> = spec.iter().map(|s| s.0).collect();
    tape.record(
        "concat_cols",
        Tensor::new(vec![rows, total], data)?,
        Op::ConcatCols(spec),
        &ids,
    )
}
