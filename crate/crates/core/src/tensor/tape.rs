use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::broadcast::{broadcast_shape, SourceIndex};
use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{numel, Result, Tensor, TensorError};
use crate::scalar::Scalar;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Softplus(usize),
    Sqrt(usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape(usize),
    Gather {
        a: usize,
        map: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Narrow {
        a: usize,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        chunk: usize,
    },
    SumAll(usize),
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax(usize),
    LayerNorm {
        a: usize,
        rstd: Vec<T>,
    },
    Normalize {
        a: usize,
        norms: Vec<T>,
        eps: T,
    },
    TopKMean {
        a: usize,
        k: usize,
        selected: Vec<usize>,
    },
    /// Square with a deliberately wrong derivative; negative control for the gradient checker.
    BrokenSquare(usize),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Ordered record of differentiable operations.
///
/// Variables borrow the tape, so every [`Var`] is tied to the tape that
/// produced it. Single-threaded by construction.
pub struct Tape<T: Scalar> {
    inner: RefCell<Inner<T>>,
    clamp_events: Cell<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tape")
            .field("nodes", &inner.nodes.len())
            .field("consumed", &inner.consumed)
            .finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            }),
            clamp_events: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Number of vectors whose norm was clamped by [`Var::normalize_last`].
    pub fn clamp_events(&self) -> usize {
        self.clamp_events.get()
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.inner.borrow(), |i| &i.nodes[id])
    }

    /// Records a tensor as a leaf; it receives a gradient iff `requires_grad()` is set.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var<'_, T>> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.push(vec![], vec![value], false, Op::Leaf)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for rank {}", base.len()),
            });
        }
        let outer = numel(&base[..axis]);
        let inner_size = numel(&base[axis + 1..]);
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        for p in parts {
            p.check_tape(self)?;
            let s = p.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            out_shape[axis] += s[axis];
            chunks.push(s[axis] * inner_size);
        }
        let total_chunk: usize = chunks.iter().sum();
        let mut value = vec![T::zero(); outer * total_chunk];
        let mut rg = false;
        {
            let inner = self.inner.borrow();
            let mut col = 0;
            for (p, &chunk) in parts.iter().zip(&chunks) {
                let node = &inner.nodes[p.id];
                rg |= node.requires_grad;
                for o in 0..outer {
                    value[o * total_chunk + col..o * total_chunk + col + chunk]
                        .copy_from_slice(&node.value[o * chunk..(o + 1) * chunk]);
                }
                col += chunk;
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(
            out_shape,
            value,
            rg,
            Op::Concat {
                parts: ids,
                outer,
                chunks,
            },
        ))
    }

    /// Replays the tape in reverse from a scalar `loss`, consuming the tape.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        loss.check_tape(self)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].shape.clone();
        if numel(&loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(nodes, node, &g, &mut grads);
        }
        let leaves = nodes
            .iter()
            .enumerate()
            .map(|(id, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    Some(
                        grads[id]
                            .take()
                            .unwrap_or_else(|| vec![T::zero(); n.value.len()]),
                    )
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves })
    }
}

fn acc<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn unary<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    a: usize,
    g: &[T],
    f: impl Fn(usize, T) -> T,
) {
    if let Some(ga) = acc(nodes, grads, a) {
        for (i, (dst, &gv)) in ga.iter_mut().zip(g).enumerate() {
            *dst = *dst + f(i, gv);
        }
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let y = &node.value;
    let out_shape = &node.shape;
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
            let ia = SourceIndex::new(&nodes[a].shape, out_shape);
            if let Some(ga) = acc(nodes, grads, a) {
                for (i, &gv) in g.iter().enumerate() {
                    let j = ia.get(i);
                    ga[j] = ga[j] + gv;
                }
            }
            let ib = SourceIndex::new(&nodes[b].shape, out_shape);
            if let Some(gb) = acc(nodes, grads, b) {
                for (i, &gv) in g.iter().enumerate() {
                    let j = ib.get(i);
                    gb[j] = gb[j] + sign * gv;
                }
            }
        }
        &Op::Mul(a, b) => {
            let ia = SourceIndex::new(&nodes[a].shape, out_shape);
            let ib = SourceIndex::new(&nodes[b].shape, out_shape);
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                for (i, &gv) in g.iter().enumerate() {
                    let j = ia.get(i);
                    ga[j] = ga[j] + gv * bv[ib.get(i)];
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for (i, &gv) in g.iter().enumerate() {
                    let j = ib.get(i);
                    gb[j] = gb[j] + gv * av[ia.get(i)];
                }
            }
        }
        &Op::Div(a, b) => {
            let ia = SourceIndex::new(&nodes[a].shape, out_shape);
            let ib = SourceIndex::new(&nodes[b].shape, out_shape);
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                for (i, &gv) in g.iter().enumerate() {
                    let j = ia.get(i);
                    ga[j] = ga[j] + gv / bv[ib.get(i)];
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for (i, &gv) in g.iter().enumerate() {
                    let j = ib.get(i);
                    let d = bv[j];
                    gb[j] = gb[j] - gv * av[ia.get(i)] / (d * d);
                }
            }
        }
        &Op::Neg(a) => unary(nodes, grads, a, g, |_, gv| -gv),
        &Op::Exp(a) => unary(nodes, grads, a, g, |i, gv| gv * y[i]),
        &Op::Log(a) => {
            let x = &nodes[a].value;
            unary(nodes, grads, a, g, |i, gv| gv / x[i])
        }
        &Op::Abs(a) => {
            let x = &nodes[a].value;
            unary(nodes, grads, a, g, |i, gv| {
                if x[i] > T::zero() {
                    gv
                } else if x[i] < T::zero() {
                    -gv
                } else {
                    T::zero()
                }
            })
        }
        &Op::Sigmoid(a) => unary(nodes, grads, a, g, |i, gv| gv * y[i] * (T::one() - y[i])),
        &Op::Relu(a) => {
            let x = &nodes[a].value;
            unary(nodes, grads, a, g, |i, gv| if x[i] > T::zero() { gv } else { T::zero() })
        }
        &Op::Gelu(a) => {
            let x = &nodes[a].value;
            unary(nodes, grads, a, g, |i, gv| gv * kernels::gelu_grad(x[i]))
        }
        &Op::Softplus(a) => {
            let x = &nodes[a].value;
            unary(nodes, grads, a, g, |i, gv| gv * kernels::sigmoid(x[i]))
        }
        &Op::Sqrt(a) => unary(nodes, grads, a, g, |i, gv| gv * T::lit(0.5) / y[i]),
        &Op::Scale(a, c) => unary(nodes, grads, a, g, |_, gv| gv * c),
        &Op::AddScalar(a) | &Op::Reshape(a) => unary(nodes, grads, a, g, |_, gv| gv),
        &Op::BrokenSquare(a) => {
            let x = &nodes[a].value;
            unary(nodes, grads, a, g, |i, gv| gv * x[i])
        }
        &Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                gemm_nt(g, bv, ga, m, k, n);
            }
            if let Some(gb) = acc(nodes, grads, b) {
                gemm_tn(av, g, gb, m, k, n);
            }
        }
        &Op::BatchMatMul { a, b, batch, m, k, n } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if let Some(ga) = acc(nodes, grads, a) {
                for t in 0..batch {
                    gemm_nt(
                        &g[t * m * n..(t + 1) * m * n],
                        &bv[t * k * n..(t + 1) * k * n],
                        &mut ga[t * m * k..(t + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
            }
            if let Some(gb) = acc(nodes, grads, b) {
                for t in 0..batch {
                    gemm_tn(
                        &av[t * m * k..(t + 1) * m * k],
                        &g[t * m * n..(t + 1) * m * n],
                        &mut gb[t * k * n..(t + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Op::Gather { a, map } => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for (&src, &gv) in map.iter().zip(g) {
                    ga[src] = ga[src] + gv;
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            chunks,
        } => {
            let total: usize = chunks.iter().sum();
            let mut col = 0;
            for (&p, &chunk) in parts.iter().zip(chunks) {
                if let Some(gp) = acc(nodes, grads, p) {
                    for o in 0..*outer {
                        let src = &g[o * total + col..o * total + col + chunk];
                        for (d, &s) in gp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                col += chunk;
            }
        }
        &Op::Narrow {
            a,
            outer,
            src_chunk,
            offset,
            chunk,
        } => {
            if let Some(ga) = acc(nodes, grads, a) {
                for o in 0..outer {
                    let dst = &mut ga[o * src_chunk + offset..o * src_chunk + offset + chunk];
                    for (d, &s) in dst.iter_mut().zip(&g[o * chunk..(o + 1) * chunk]) {
                        *d = *d + s;
                    }
                }
            }
        }
        &Op::SumAll(a) => {
            if let Some(ga) = acc(nodes, grads, a) {
                ga.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        &Op::SumAxis { a, outer, len, inner } => {
            if let Some(ga) = acc(nodes, grads, a) {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            let d = &mut ga[(o * len + j) * inner + i];
                            *d = *d + g[o * inner + i];
                        }
                    }
                }
            }
        }
        &Op::Softmax(a) => {
            let d = *out_shape.last().unwrap_or(&1);
            if let Some(ga) = acc(nodes, grads, a) {
                for r in 0..y.len() / d.max(1) {
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        ga[r * d + j] = ga[r * d + j] + ys[j] * (gs[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, rstd } => {
            let d = *out_shape.last().unwrap_or(&1);
            let inv_d = T::one() / T::lit(d as f64);
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &rs) in rstd.iter().enumerate() {
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let mg: T = gs.iter().copied().sum::<T>() * inv_d;
                    let mgy: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    for j in 0..d {
                        ga[r * d + j] = ga[r * d + j] + rs * (gs[j] - mg - ys[j] * mgy);
                    }
                }
            }
        }
        Op::Normalize { a, norms, eps } => {
            let d = *out_shape.last().unwrap_or(&1);
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &nrm) in norms.iter().enumerate() {
                    let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    if nrm > *eps {
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            ga[r * d + j] = ga[r * d + j] + (gs[j] - ys[j] * dot) / nrm;
                        }
                    } else {
                        for j in 0..d {
                            ga[r * d + j] = ga[r * d + j] + gs[j] / *eps;
                        }
                    }
                }
            }
        }
        Op::TopKMean { a, k, selected } => {
            let n = *nodes[*a].shape.last().unwrap_or(&1);
            let inv_k = T::one() / T::lit(*k as f64);
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, &gv) in g.iter().enumerate() {
                    for &j in &selected[r * k..(r + 1) * k] {
                        ga[r * n + j] = ga[r * n + j] + gv * inv_k;
                    }
                }
            }
        }
    }
}

/// Gradients of the leaves of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf, `None` for leaves that do not require gradients.
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::new(v.shape(), g.to_vec()).expect("gradient matches leaf shape"))
    }

    /// Moves the gradient of `v` into `t.grad`.
    pub fn write_into(&self, v: Var<'_, T>, t: &mut Tensor<T>) -> Result<()> {
        match self.get(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => {
                t.clear_grad();
                Ok(())
            }
        }
    }
}

fn row_len(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn check_tape(&self, tape: &Tape<T>) -> Result<()> {
        if std::ptr::eq(self.tape, tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.node(self.id).value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    pub fn value(&self) -> Tensor<T> {
        let n = self.tape.node(self.id);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    /// Runs `f` on the node's data without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.tape.node(self.id).value)
    }

    pub fn item(&self) -> T {
        let n = self.tape.node(self.id);
        assert_eq!(n.value.len(), 1, "item() on shape {:?}", n.shape);
        n.value[0]
    }

    /// Same value as a fresh non-differentiable leaf.
    pub fn detach(self) -> Var<'t, T> {
        let (shape, value) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.clone())
        };
        self.tape.push(shape, value, false, Op::Leaf)
    }

    fn map_unary(self, f: impl Fn(T) -> T, op: Op<T>) -> Var<'t, T> {
        let (shape, value, rg) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect(), n.requires_grad)
        };
        self.tape.push(shape, value, rg, op)
    }

    fn binary(self, other: Var<'t, T>, op_name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>, bool)> {
        other.check_tape(self.tape)?;
        let inner = self.tape.inner.borrow();
        let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
        let shape = broadcast_shape(&na.shape, &nb.shape).map_err(|_| TensorError::ShapeMismatch {
            op: op_name,
            lhs: na.shape.clone(),
            rhs: nb.shape.clone(),
        })?;
        let ia = SourceIndex::new(&na.shape, &shape);
        let ib = SourceIndex::new(&nb.shape, &shape);
        let value = (0..numel(&shape))
            .map(|i| f(na.value[ia.get(i)], nb.value[ib.get(i)]))
            .collect();
        Ok((shape, value, na.requires_grad || nb.requires_grad))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v, rg) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(s, v, rg, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v, rg) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(s, v, rg, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (s, v, rg) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(s, v, rg, Op::Mul(self.id, other.id)))
    }

    /// Elementwise division; a zero divisor is a domain error.
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        if let Some(z) = other.with_data(|d| d.iter().copied().find(|x| *x == T::zero())) {
            return Err(TensorError::Domain {
                op: "div",
                value: z.as_f64(),
            });
        }
        let (s, v, rg) = self.binary(other, "div", |a, b| a / b)?;
        Ok(self.tape.push(s, v, rg, Op::Div(self.id, other.id)))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.map_unary(|x| -x, Op::Neg(self.id))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.map_unary(|x| x.exp(), Op::Exp(self.id))
    }

    /// Natural logarithm; nonpositive operands are a domain error.
    pub fn log(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.with_data(|d| d.iter().copied().find(|x| *x <= T::zero())) {
            return Err(TensorError::Domain {
                op: "log",
                value: bad.as_f64(),
            });
        }
        Ok(self.map_unary(|x| x.ln(), Op::Log(self.id)))
    }

    /// Absolute value; the derivative at exactly 0 is taken as 0.
    pub fn abs(self) -> Var<'t, T> {
        self.map_unary(|x| x.abs(), Op::Abs(self.id))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.map_unary(kernels::sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.map_unary(|x| x.max(T::zero()), Op::Relu(self.id))
    }

    pub fn gelu(self) -> Var<'t, T> {
        self.map_unary(kernels::gelu, Op::Gelu(self.id))
    }

    /// `log(1 + e^x)`, asymptotic beyond |x| > 30.
    pub fn softplus(self) -> Var<'t, T> {
        self.map_unary(kernels::softplus, Op::Softplus(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t, T>> {
        if let Some(bad) = self.with_data(|d| d.iter().copied().find(|x| *x <= T::zero())) {
            return Err(TensorError::Domain {
                op: "sqrt",
                value: bad.as_f64(),
            });
        }
        Ok(self.map_unary(|x| x.sqrt(), Op::Sqrt(self.id)))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.map_unary(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.map_unary(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self).expect("same shape")
    }

    #[doc(hidden)]
    /// `x²` whose recorded derivative is `x` instead of `2x`.
    pub fn broken_square(self) -> Var<'t, T> {
        self.map_unary(|x| x * x, Op::BrokenSquare(self.id))
    }

    /// `[..., k] · [k, n] -> [..., n]`
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        other.check_tape(self.tape)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k.max(1);
        let mut out = vec![T::zero(); m * n];
        let rg = {
            let inner = self.tape.inner.borrow();
            let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            gemm_nn(&na.value, &nb.value, &mut out, m, k, n);
            na.requires_grad || nb.requires_grad
        };
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.tape.push(
            shape,
            out,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    /// `[B, m, k] · [B, k, n] -> [B, m, n]`
    pub fn bmm(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        other.check_tape(self.tape)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let rg = {
            let inner = self.tape.inner.borrow();
            let (na, nb) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            for t in 0..batch {
                gemm_nn(
                    &na.value[t * m * k..(t + 1) * m * k],
                    &nb.value[t * k * n..(t + 1) * k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            na.requires_grad || nb.requires_grad
        };
        Ok(self.tape.push(
            vec![batch, m, n],
            out,
            rg,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            },
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let (old, value, rg) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.clone(), n.requires_grad)
        };
        if numel(&shape) != value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape,
            });
        }
        Ok(self.tape.push(shape, value, rg, Op::Reshape(self.id)))
    }

    fn gather(self, shape: Vec<usize>, map: Vec<usize>) -> Var<'t, T> {
        let (value, rg) = {
            let n = self.tape.node(self.id);
            (map.iter().map(|&i| n.value[i]).collect(), n.requires_grad)
        };
        self.tape.push(shape, value, rg, Op::Gather { a: self.id, map })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let rank = shape.len();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = numel(&shape);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..total {
            map.push(offset);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(self.gather(out_shape, map))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(self) -> Result<Var<'t, T>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: "rank < 2".into(),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    /// Selects rows of the leading axis (embedding lookup).
    pub fn index_select(self, rows: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n0 = *shape.first().ok_or(TensorError::Invalid {
            op: "index_select",
            msg: "rank 0".into(),
        })?;
        let inner = numel(&shape[1..]);
        let mut map = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n0 {
                return Err(TensorError::Invalid {
                    op: "index_select",
                    msg: format!("row {r} out of range {n0}"),
                });
            }
            map.extend(r * inner..(r + 1) * inner);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        Ok(self.gather(out_shape, map))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src_chunk = shape[axis] * inner;
        let (offset, chunk) = (start * inner, len * inner);
        let (value, rg) = {
            let n = self.tape.node(self.id);
            let mut v = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                v.extend_from_slice(&n.value[o * src_chunk + offset..o * src_chunk + offset + chunk]);
            }
            (v, n.requires_grad)
        };
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(
            out_shape,
            value,
            rg,
            Op::Narrow {
                a: self.id,
                outer,
                src_chunk,
                offset,
                chunk,
            },
        ))
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let (value, rg) = {
            let n = self.tape.node(self.id);
            (n.value.iter().copied().sum::<T>(), n.requires_grad)
        };
        self.tape.push(vec![], vec![value], rg, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.numel();
        self.sum_all().scale(T::one() / T::lit(n as f64))
    }

    /// Sum over `axis`; the axis is kept with size 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let (value, rg) = {
            let n = self.tape.node(self.id);
            let mut v = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        v[o * inner + i] = v[o * inner + i] + n.value[(o * len + j) * inner + i];
                    }
                }
            }
            (v, n.requires_grad)
        };
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(self.tape.push(
            out_shape,
            value,
            rg,
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner,
            },
        ))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'t, T>> {
        let len = *self.shape().get(axis).unwrap_or(&1);
        Ok(self.sum_axis(axis, keepdim)?.scale(T::one() / T::lit(len as f64)))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_last(self) -> Var<'t, T> {
        let (shape, value, rg) = {
            let n = self.tape.node(self.id);
            let d = row_len(&n.shape);
            let mut v = n.value.clone();
            for row in v.chunks_mut(d.max(1)) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    s = s + *x;
                }
                for x in row.iter_mut() {
                    *x = *x / s;
                }
            }
            (n.shape.clone(), v, n.requires_grad)
        };
        self.tape.push(shape, value, rg, Op::Softmax(self.id))
    }

    /// Normalizes the last axis to zero mean and unit (population) variance.
    pub fn layer_norm_last(self, eps: T) -> Var<'t, T> {
        let (shape, value, rstd, rg) = {
            let n = self.tape.node(self.id);
            let d = row_len(&n.shape).max(1);
            let inv_d = T::one() / T::lit(d as f64);
            let mut v = n.value.clone();
            let mut rstd = Vec::with_capacity(v.len() / d);
            for row in v.chunks_mut(d) {
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * rs;
                }
                rstd.push(rs);
            }
            (n.shape.clone(), v, rstd, n.requires_grad)
        };
        self.tape.push(shape, value, rg, Op::LayerNorm { a: self.id, rstd })
    }

    /// Scales each last-axis vector to unit L2 norm; norms below `eps` are
    /// clamped to `eps` and counted in [`Tape::clamp_events`].
    pub fn normalize_last(self, eps: T) -> Var<'t, T> {
        let (shape, value, norms, rg) = {
            let n = self.tape.node(self.id);
            let d = row_len(&n.shape).max(1);
            let mut v = n.value.clone();
            let mut norms = Vec::with_capacity(v.len() / d);
            let mut clamped = 0;
            for row in v.chunks_mut(d) {
                let nrm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
                let denom = if nrm > eps {
                    nrm
                } else {
                    clamped += 1;
                    eps
                };
                for x in row.iter_mut() {
                    *x = *x / denom;
                }
                norms.push(nrm);
            }
            if clamped > 0 {
                self.tape.clamp_events.set(self.tape.clamp_events.get() + clamped);
                log::warn!("normalize: {clamped} vector(s) with norm below {eps} clamped");
            }
            (n.shape.clone(), v, norms, n.requires_grad)
        };
        self.tape.push(shape, value, rg, Op::Normalize { a: self.id, norms, eps })
    }

    /// Mean of the `k` largest entries along the last axis.
    pub fn topk_mean_last(self, k: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let n = row_len(&shape);
        if shape.is_empty() || k == 0 || k > n {
            return Err(TensorError::Invalid {
                op: "topk_mean",
                msg: format!("k = {k} outside 1..={n}"),
            });
        }
        let (value, selected, rg) = {
            let node = self.tape.node(self.id);
            let rows = node.value.len() / n;
            let mut value = Vec::with_capacity(rows);
            let mut selected = Vec::with_capacity(rows * k);
            let kk = T::lit(k as f64);
            for row in node.value.chunks(n) {
                // Index order makes k = n agree bitwise with a plain mean.
                let mut idx = kernels::topk_indices(row, k);
                idx.sort_unstable();
                value.push(idx.iter().map(|&j| row[j]).sum::<T>() / kk);
                selected.extend(idx);
            }
            (value, selected, node.requires_grad)
        };
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.tape.push(
            out_shape,
            value,
            rg,
            Op::TopKMean {
                a: self.id,
                k,
                selected,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2], &[1., 2.]));
        let b = tape.constant(&t(&[2], &[3., 4.]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4., 6.]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros([2, 3]));
        let b = tape.constant(&Tensor::zeros([4]));
        let err = a.add(b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![4]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4]"));
    }

    #[test]
    fn log_exp_inverse() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[0.5, -1.2]));
        let y = x.exp().log().unwrap().value();
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
        assert!((y.data()[1] + 1.2).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1.0, 0.0]));
        assert!(matches!(x.log(), Err(TensorError::Domain { op: "log", .. })));
        let y = tape.constant(&t(&[2], &[1.0, 2.0]));
        assert!(matches!(y.div(x), Err(TensorError::Domain { op: "div", .. })));
    }

    #[test]
    fn abs_subgradient() {
        let tape = Tape::new();
        let x = tape.param(&t(&[3], &[2.0, -3.0, 0.0]));
        let loss = x.abs().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i2 = tape.constant(&Tensor::eye(2));
        let m = tape.constant(&t(&[2, 2], &[1.5, -2.0, 3.25, 4.0]));
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.5, -2.0, 3.25, 4.0]);
        let a = tape.constant(&t(&[1, 2], &[1., 2.]));
        let b = tape.constant(&t(&[2, 1], &[3., 4.]));
        let c = a.matmul(b).unwrap().value();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
        assert!(a.matmul(a).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::new();
        let x = tape.param(&t(&[3], &[1., 2., 3.]));
        let loss = x.square().sum_all();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_contract() {
        let tape = Tape::new();
        let x = tape.param(&t(&[2], &[1., 2.]));
        let frozen = tape.constant(&t(&[2], &[1., 1.]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
        let loss = x.mul(frozen).unwrap().sum_all();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(frozen).is_none());
        assert_eq!(g.get(x).unwrap(), &[1., 1.]);
        assert_eq!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed);
    }

    #[test]
    fn unreachable_leaf_gets_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(&t(&[2], &[1., 2.]));
        let y = tape.param(&t(&[1], &[5.]));
        let g = tape.backward(y.sum_all()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0., 0.]);
        let mut leaf = t(&[2], &[1., 2.]).with_requires_grad(true);
        g.write_into(x, &mut leaf).unwrap();
        assert_eq!(leaf.grad(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn foreign_var_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let a = t1.scalar(1.0);
        let b = t2.scalar(2.0);
        assert_eq!(a.add(b).unwrap_err(), TensorError::ForeignVar);
        assert_eq!(t2.backward(a).unwrap_err(), TensorError::ForeignVar);
    }

    #[test]
    fn softmax_uniform() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[3], &[7.0, 7.0, 7.0]));
        for v in x.softmax_last().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(&t(&[2], &[1000.0, 1000.0]));
        assert_eq!(big.softmax_last().value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn topk_bounds_and_values() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[4], &[0.1, 0.9, 0.5, 0.3]));
        assert_eq!(x.topk_mean_last(1).unwrap().item(), 0.9);
        assert!((x.topk_mean_last(4).unwrap().item() - 0.45).abs() < 1e-15);
        assert!(x.topk_mean_last(0).is_err());
        assert!(x.topk_mean_last(5).is_err());
    }

    #[test]
    fn normalize_clamps_zero_vector() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let y = x.normalize_last(1e-12).value();
        assert_eq!(y.data(), &[0.0, 0.0, 0.6, 0.8]);
        assert_eq!(tape.clamp_events(), 1);
    }

    #[test]
    fn permute_concat_narrow() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[2, 3], &[0., 1., 2., 3., 4., 5.]));
        let xt = x.transpose_last2().unwrap().value();
        assert_eq!(xt.shape(), &[3, 2]);
        assert_eq!(xt.data(), &[0., 3., 1., 4., 2., 5.]);
        let c = tape.concat(&[x, x], 1).unwrap().value();
        assert_eq!(c.shape(), &[2, 6]);
        assert_eq!(c.row(1), &[3., 4., 5., 3., 4., 5.]);
        let n = x.narrow(1, 1, 2).unwrap().value();
        assert_eq!(n.data(), &[1., 2., 4., 5.]);
        let r = x.index_select(&[1, 1, 0]).unwrap().value();
        assert_eq!(r.data(), &[3., 4., 5., 3., 4., 5., 0., 1., 2.]);
    }
}
