//! Reverse-mode differentiation on a Wengert tape.
//!
//! Every operation on a [`Var`] appends a node holding its value and, when
//! any parent is tracked, a closure mapping the output adjoint to parent
//! adjoints. Nodes are appended in evaluation order, so walking the tape
//! backwards is a reverse topological traversal.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackwardFn<S> = Box<dyn Fn(&Tensor<S>) -> Vec<Tensor<S>>>;

struct Node<S: Scalar> {
    op: &'static str,
    value: Rc<Tensor<S>>,
    parents: Vec<usize>,
    tracked: bool,
    backward: Option<BackwardFn<S>>,
}

/// A single-owner recording of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    first_non_finite: Cell<Option<usize>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), first_non_finite: Cell::new(None) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: &'static str, value: Tensor<S>, parents: Vec<usize>, backward: Option<BackwardFn<S>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|&p| nodes[p].tracked);
        if self.first_non_finite.get().is_none() && !value.is_finite() {
            self.first_non_finite.set(Some(nodes.len()));
        }
        let idx = nodes.len();
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents,
            tracked,
            backward: if tracked { backward } else { None },
        });
        idx
    }

    fn leaf(&self, value: Tensor<S>, tracked: bool) -> Var<'_, S> {
        let idx = self.push("leaf", value, Vec::new(), None);
        self.nodes.borrow_mut()[idx].tracked = tracked;
        Var { tape: self, idx }
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant in backward.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    /// Name of the first operation whose output contained NaN or Inf.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.first_non_finite.get().map(|i| self.nodes.borrow()[i].op)
    }

    /// Propagates adjoints from the scalar `loss` back to every tracked node.
    ///
    /// Leaves unreachable from `loss` get no entry; [`Gradients::wrt`]
    /// reports zeros for them.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to a different tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.idx];
        if root.value.numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", root.value.shape())));
        }
        if let Some(bad) = self.first_non_finite.get() {
            if bad <= loss.idx {
                return Err(Error::NonFinite { op: nodes[bad].op.to_string() });
            }
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(Tensor::ones(root.value.shape()));
        for i in (0..=loss.idx).rev() {
            let node = &nodes[i];
            let Some(bw) = node.backward.as_ref() else { continue };
            let Some(g) = grads[i].as_ref() else { continue };
            let parent_grads = bw(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].tracked {
                    continue;
                }
                if !pg.is_finite() {
                    return Err(Error::NonFinite { op: format!("backward of {}", node.op) });
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape from op {}", node.op);
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// The gradient for `v`, zero when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_, S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.idx]))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    idx: usize,
}

impl<S: Scalar> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.idx, self.shape())
    }
}

fn axis_index(shape: &[usize], axis: isize) -> usize {
    let nd = shape.len() as isize;
    let a = if axis < 0 { nd + axis } else { axis };
    assert!(a >= 0 && a < nd, "axis {axis} out of range for {shape:?}");
    a as usize
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.idx].value.shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].tracked
    }

    fn unary(self, op: &'static str, value: Tensor<S>, bw: impl Fn(&Tensor<S>) -> Tensor<S> + 'static) -> Self {
        let idx = self.tape.push(op, value, vec![self.idx], Some(Box::new(move |g| vec![bw(g)])));
        Var { tape: self.tape, idx }
    }

    fn binary(
        self,
        other: Self,
        op: &'static str,
        value: Tensor<S>,
        bw: impl Fn(&Tensor<S>) -> (Tensor<S>, Tensor<S>) + 'static,
    ) -> Self {
        assert!(std::ptr::eq(self.tape, other.tape), "operands on different tapes");
        let idx = self.tape.push(
            op,
            value,
            vec![self.idx, other.idx],
            Some(Box::new(move |g| {
                let (a, b) = bw(g);
                vec![a, b]
            })),
        );
        Var { tape: self.tape, idx }
    }

    /// Same value, no gradient flow.
    pub fn detach(self) -> Self {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub fn add(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary(o, "add", a.add(&b), move |g| (g.sum_to_shape(&sa), g.sum_to_shape(&sb)))
    }

    pub fn sub(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.binary(o, "sub", a.sub(&b), move |g| (g.sum_to_shape(&sa), g.neg().sum_to_shape(&sb)))
    }

    pub fn mul(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        let out = a.mul(&b);
        self.binary(o, "mul", out, move |g| {
            (g.mul(&b).sum_to_shape(a.shape()), g.mul(&a).sum_to_shape(b.shape()))
        })
    }

    pub fn div(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        let out = a.div(&b);
        self.binary(o, "div", out, move |g| {
            let ga = g.div(&b).sum_to_shape(a.shape());
            let gb = g.mul(&a).div(&b.mul(&b)).neg().sum_to_shape(b.shape());
            (ga, gb)
        })
    }

    pub fn neg(self) -> Self {
        let v = self.value().neg();
        self.unary("neg", v, |g| g.neg())
    }

    pub fn scale(self, c: S) -> Self {
        let v = self.value().scale(c);
        self.unary("scale", v, move |g| g.scale(c))
    }

    pub fn add_scalar(self, c: S) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary("add_scalar", v, |g| g.clone())
    }

    pub fn square(self) -> Self {
        let x = self.value();
        let v = x.map(|a| a * a);
        self.unary("square", v, move |g| g.zip_map(&x, |g, a| S::lit(2.0) * a * g))
    }

    /// Square root whose derivative at exactly zero is taken as zero.
    pub fn sqrt(self) -> Self {
        let y = Rc::new(self.value().map(|a| a.sqrt()));
        let yc = y.clone();
        self.unary("sqrt", (*y).clone(), move |g| {
            g.zip_map(&yc, |g, y| if y > S::zero() { g / (S::lit(2.0) * y) } else { S::zero() })
        })
    }

    pub fn exp(self) -> Self {
        let y = Rc::new(self.value().map(|a| a.exp()));
        let yc = y.clone();
        self.unary("exp", (*y).clone(), move |g| g.zip_map(&yc, |g, y| g * y))
    }

    pub fn ln(self) -> Self {
        let x = self.value();
        let v = x.map(|a| a.ln());
        self.unary("ln", v, move |g| g.zip_map(&x, |g, a| g / a))
    }

    pub fn relu(self) -> Self {
        let x = self.value();
        let v = x.map(|a| a.max(S::zero()));
        self.unary("relu", v, move |g| g.zip_map(&x, |g, a| if a > S::zero() { g } else { S::zero() }))
    }

    /// Matrix product over the last two axes (see [`Tensor::matmul`]).
    pub fn matmul(self, o: Self) -> Self {
        let (a, b) = (self.value(), o.value());
        let out = a.matmul(&b);
        self.binary(o, "matmul", out, move |g| {
            let ga = g.matmul(&b.transpose());
            let gb = a.transpose().matmul(g);
            (reduce_batch(ga, a.shape()), reduce_batch(gb, b.shape()))
        })
    }

    pub fn transpose(self) -> Self {
        let v = self.value().transpose();
        self.unary("transpose", v, |g| g.transpose())
    }

    pub fn permute(self, axes: &[usize]) -> Self {
        let v = self.value().permute(axes);
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        self.unary("permute", v, move |g| g.permute(&inv))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let x = self.value();
        let orig = x.shape().to_vec();
        let v = x.reshape(shape);
        self.unary("reshape", v, move |g| g.reshape(&orig))
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Self {
        let x = self.value();
        let orig = x.shape().to_vec();
        let v = x.broadcast_to(shape);
        self.unary("broadcast_to", v, move |g| g.sum_to_shape(&orig))
    }

    pub fn sum_axis(self, axis: isize, keepdim: bool) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let a = axis_index(&shape, axis);
        let v = x.sum_axis(axis, keepdim);
        self.unary("sum_axis", v, move |g| {
            let mut kd = shape.clone();
            kd[a] = 1;
            g.reshape(&kd).broadcast_to(&shape)
        })
    }

    pub fn mean_axis(self, axis: isize, keepdim: bool) -> Self {
        let n = self.shape()[axis_index(&self.shape(), axis)];
        self.sum_axis(axis, keepdim).scale(S::one() / S::from_count(n))
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let v = Tensor::scalar(x.sum());
        self.unary("sum", v, move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel();
        self.sum().scale(S::one() / S::from_count(n))
    }

    /// Minimum along `axis`; the adjoint flows to the first minimiser.
    pub fn min_axis(self, axis: isize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let a = axis_index(&shape, axis);
        let (v, arg) = x.min_axis(axis);
        self.unary("min_axis", v, move |g| {
            let (outer, len, inner) = crate::tensor::split_axis(&shape, a);
            let mut out = Tensor::zeros(&shape);
            let d = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    d[(o * len + arg[o * inner + i]) * inner + i] = g.data()[o * inner + i];
                }
            }
            out
        })
    }

    pub fn softmax(self, axis: isize) -> Self {
        let y = Rc::new(self.value().softmax(axis));
        let yc = y.clone();
        self.unary("softmax", (*y).clone(), move |g| {
            let gy = g.mul(&yc);
            let s = gy.sum_axis(axis, true);
            gy.sub(&yc.mul(&s))
        })
    }

    pub fn slice(self, axis: isize, start: usize, len: usize) -> Self {
        let x = self.value();
        let a = axis_index(x.shape(), axis);
        let full = x.shape()[a];
        let v = x.slice(a, start, len);
        self.unary("slice", v, move |g| g.unslice(a, start, full))
    }

    /// Gathers rows along axis 0 (repeats allowed).
    pub fn index_select(self, indices: &[usize]) -> Self {
        let x = self.value();
        let rows = x.shape()[0];
        let v = x.index_select(indices);
        let idx = indices.to_vec();
        self.unary("index_select", v, move |g| g.index_add(&idx, rows))
    }

    /// For each row of `self` (n×3) the squared distance to its nearest row
    /// of `other` (m×3); ties resolve to the lowest index of `other`.
    pub fn nearest_sq_dist(self, other: Self) -> Self {
        let (a, b) = (self.value(), other.value());
        let (n, m) = (a.shape()[0], b.shape()[0]);
        assert!(a.shape() == [n, 3] && b.shape() == [m, 3] && m > 0, "nearest_sq_dist shapes");
        let mut vals = Vec::with_capacity(n);
        let mut arg = Vec::with_capacity(n);
        for i in 0..n {
            let p = a.row3(i);
            let (mut best, mut bj) = (S::infinity(), 0);
            for j in 0..m {
                let q = b.row3(j);
                let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                if d < best {
                    best = d;
                    bj = j;
                }
            }
            vals.push(best);
            arg.push(bj);
        }
        self.binary(other, "nearest_sq_dist", Tensor::from_vec(&[n], vals), move |g| {
            let mut ga = Tensor::zeros(&[n, 3]);
            let mut gb = Tensor::zeros(&[m, 3]);
            for i in 0..n {
                let j = arg[i];
                let coef = S::lit(2.0) * g.data()[i];
                for c in 0..3 {
                    let d = coef * (a.data()[3 * i + c] - b.data()[3 * j + c]);
                    ga.data_mut()[3 * i + c] += d;
                    gb.data_mut()[3 * j + c] -= d;
                }
            }
            (ga, gb)
        })
    }
}

/// Sums a batched adjoint over batch axes that the operand was broadcast along.
fn reduce_batch<S: Scalar>(g: Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if g.shape() == shape {
        return g;
    }
    let nd = g.ndim();
    let (r, c) = (g.shape()[nd - 2], g.shape()[nd - 1]);
    let batch = g.numel() / (r * c);
    g.into_shape(&[batch, r, c]).sum_axis(0, false).into_shape(shape)
}

/// Concatenates variables along `axis`.
pub fn concat<'t, S: Scalar>(parts: &[Var<'t, S>], axis: usize) -> Var<'t, S> {
    assert!(!parts.is_empty(), "concat of nothing");
    let tape = parts[0].tape;
    let values: Vec<Rc<Tensor<S>>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<S>> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat(&refs, axis);
    let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let idx = tape.push(
        "concat",
        out,
        parts.iter().map(|p| p.idx).collect(),
        Some(Box::new(move |g| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let s = g.slice(axis, start, w);
                    start += w;
                    s
                })
                .collect()
        })),
    );
    Var { tape, idx }
}

impl<'t, S: Scalar> std::ops::Add for Var<'t, S> {
    type Output = Var<'t, S>;
    fn add(self, o: Self) -> Self {
        Var::add(self, o)
    }
}

impl<'t, S: Scalar> std::ops::Sub for Var<'t, S> {
    type Output = Var<'t, S>;
    fn sub(self, o: Self) -> Self {
        Var::sub(self, o)
    }
}

impl<'t, S: Scalar> std::ops::Mul for Var<'t, S> {
    type Output = Var<'t, S>;
    fn mul(self, o: Self) -> Self {
        Var::mul(self, o)
    }
}

impl<'t, S: Scalar> std::ops::Div for Var<'t, S> {
    type Output = Var<'t, S>;
    fn div(self, o: Self) -> Self {
        Var::div(self, o)
    }
}

impl<'t, S: Scalar> std::ops::Neg for Var<'t, S> {
    type Output = Var<'t, S>;
    fn neg(self) -> Self {
        Var::neg(self)
    }
}
