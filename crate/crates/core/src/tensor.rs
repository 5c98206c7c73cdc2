//! Dense row-major n-dimensional arrays.
//!
//! `Tensor` is a plain value type: every operation returns a fresh tensor.
//! Shape violations are programming errors and panic with a descriptive
//! message; fallible construction from user data goes through [`Tensor::new`].

use std::fmt;

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= 32 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, ... {} values]", &self.data[..8], self.data.len())
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numpy-style broadcast of two shapes, aligned on the right.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` viewed inside `out` (length `out.len()`), with zero
/// stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every multi-index of `out` in row-major order, passing the linear
/// offsets into two broadcast operands.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..total {
        f(oa, ob);
        for d in (0..nd).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    /// Like [`Tensor::new`] but panics on a length mismatch.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        Self::new(shape.to_vec(), data).expect("tensor data length")
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    /// Builds an `n×3` tensor from rows.
    pub fn from_rows(rows: &[[S; 3]]) -> Self {
        Self::from_vec(&[rows.len(), 3], rows.iter().flatten().copied().collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> S {
        assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {index:?} out of bounds for {:?} (axis {i})", self.shape);
            off = off * d + ix;
        }
        self.data[off]
    }

    /// Row `i` of an `n×3` tensor.
    pub fn row3(&self, i: usize) -> [S; 3] {
        debug_assert_eq!(self.shape.last(), Some(&3));
        [self.data[3 * i], self.data[3 * i + 1], self.data[3 * i + 2]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        self.clone().into_shape(shape)
    }

    pub fn into_shape(self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "cannot reshape {:?} into {shape:?}", self.shape);
        Self { shape: shape.to_vec(), data: self.data }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| T::lit(x.as_f64())).collect() }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Elementwise combination with numpy broadcasting.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(S, S) -> S) -> Self {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out = broadcast_shapes(&self.shape, &other.shape)
            .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", self.shape, other.shape));
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let mut data = Vec::with_capacity(out.iter().product());
        for_each_broadcast(&out, &sa, &sb, |ia, ib| data.push(f(self.data[ia], other.data[ib])));
        Self { shape: out, data }
    }

    /// Sums a broadcast result back down to `shape` (the adjoint of broadcasting).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Self {
        if self.shape == shape {
            return self.clone();
        }
        let out = &self.shape;
        assert!(
            broadcast_shapes(shape, out).as_deref() == Some(out.as_slice()),
            "cannot reduce {out:?} to {shape:?}"
        );
        let st = broadcast_strides(shape, out);
        let own = contiguous_strides(out);
        let mut acc = Self::zeros(shape);
        for_each_broadcast(out, &own, &st, |io, it| acc.data[it] += self.data[io]);
        acc
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Self {
        Self::zeros(shape).broadcast_zip(self, |_, b| b)
    }

    pub fn add(&self, o: &Self) -> Self {
        self.broadcast_zip(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.broadcast_zip(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Self) -> Self {
        self.broadcast_zip(o, |a, b| a * b)
    }

    pub fn div(&self, o: &Self) -> Self {
        self.broadcast_zip(o, |a, b| a / b)
    }

    pub fn scale(&self, c: S) -> Self {
        self.map(|x| x * c)
    }

    pub fn neg(&self) -> Self {
        self.map(|x| -x)
    }

    pub fn add_assign(&mut self, o: &Self) {
        assert_eq!(self.shape, o.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / S::from_count(self.data.len())
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, o: &Self) -> S {
        assert_eq!(self.shape, o.shape, "max_abs_diff shape mismatch");
        self.data.iter().zip(&o.data).fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn norm(&self) -> S {
        self.data.iter().map(|&x| x * x).sum::<S>().sqrt()
    }

    pub fn dot(&self, o: &Self) -> S {
        assert_eq!(self.shape, o.shape, "dot shape mismatch");
        self.data.iter().zip(&o.data).map(|(&a, &b)| a * b).sum()
    }

    fn norm_axis(&self, axis: isize) -> usize {
        let nd = self.shape.len() as isize;
        let a = if axis < 0 { nd + axis } else { axis };
        assert!(a >= 0 && a < nd, "axis {axis} out of range for {:?}", self.shape);
        a as usize
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Self {
        let axis = self.norm_axis(axis);
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Self { shape, data }
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Self {
        let a = self.norm_axis(axis);
        let n = S::from_count(self.shape[a]);
        self.sum_axis(axis, keepdim).map(|x| x / n)
    }

    /// Minimum along `axis` (removed), with the index of the first minimiser.
    pub fn min_axis(&self, axis: isize) -> (Self, Vec<usize>) {
        let axis = self.norm_axis(axis);
        let (outer, len, inner) = split_axis(&self.shape, axis);
        assert!(len > 0, "min over empty axis");
        let mut vals = vec![S::zero(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = self.data[o * len * inner + i];
                let mut bi = 0;
                for l in 1..len {
                    let v = self.data[(o * len + l) * inner + i];
                    if v < best {
                        best = v;
                        bi = l;
                    }
                }
                vals[o * inner + i] = best;
                arg[o * inner + i] = bi;
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        (Self { shape, data: vals }, arg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: isize) -> Self {
        let axis = self.norm_axis(axis);
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut out = self.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = S::neg_infinity();
                for l in 0..len {
                    m = m.max(self.data[at(l)]);
                }
                let mut z = S::zero();
                for l in 0..len {
                    let e = (self.data[at(l)] - m).exp();
                    out.data[at(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out.data[at(l)] /= z;
                }
            }
        }
        out
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Self {
        let nd = self.ndim();
        assert!(nd >= 2, "transpose needs at least 2 axes, got {:?}", self.shape);
        let (r, c) = (self.shape[nd - 2], self.shape[nd - 1]);
        let batch = self.data.len() / (r * c).max(1);
        let mut data = Vec::with_capacity(self.data.len());
        for b in 0..batch {
            let m = &self.data[b * r * c..(b + 1) * r * c];
            for j in 0..c {
                for i in 0..r {
                    data.push(m[i * c + j]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(nd - 2, nd - 1);
        Self { shape, data }
    }

    pub fn permute(&self, axes: &[usize]) -> Self {
        let nd = self.ndim();
        assert_eq!(axes.len(), nd, "permute axes {axes:?} for shape {:?}", self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let own = contiguous_strides(&self.shape);
        let src: Vec<usize> = axes.iter().map(|&a| own[a]).collect();
        let zero = vec![0; nd];
        let mut data = Vec::with_capacity(self.data.len());
        for_each_broadcast(&shape, &src, &zero, |i, _| data.push(self.data[i]));
        Self { shape, data }
    }

    /// Batched matrix product over the last two axes.
    ///
    /// Leading (batch) axes must either match, or one operand must be a
    /// plain matrix that is shared across the other's batch.
    pub fn matmul(&self, o: &Self) -> Self {
        assert!(self.ndim() >= 2 && o.ndim() >= 2, "matmul of {:?} and {:?}", self.shape, o.shape);
        let (na, nb) = (self.ndim(), o.ndim());
        let (m, k) = (self.shape[na - 2], self.shape[na - 1]);
        let (k2, n) = (o.shape[nb - 2], o.shape[nb - 1]);
        assert_eq!(k, k2, "matmul inner dims: {:?} x {:?}", self.shape, o.shape);
        let ba = &self.shape[..na - 2];
        let bb = &o.shape[..nb - 2];
        let batch_shape: Vec<usize> = if ba == bb || bb.is_empty() {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else {
            panic!("matmul batch mismatch: {:?} x {:?}", self.shape, o.shape)
        };
        let batch: usize = batch_shape.iter().product();
        let step_a = if ba.is_empty() { 0 } else { m * k };
        let step_b = if bb.is_empty() { 0 } else { k * n };
        let mut data = vec![S::zero(); batch * m * n];
        for b in 0..batch {
            let am = &self.data[b * step_a..b * step_a + m * k];
            let bm = &o.data[b * step_b..b * step_b + k * n];
            let cm = &mut data[b * m * n..(b + 1) * m * n];
            for i in 0..m {
                let crow = &mut cm[i * n..(i + 1) * n];
                for p in 0..k {
                    let a = am[i * k + p];
                    if a == S::zero() {
                        continue;
                    }
                    let brow = &bm[p * n..(p + 1) * n];
                    for (c, &bv) in crow.iter_mut().zip(brow) {
                        *c += a * bv;
                    }
                }
            }
        }
        let mut shape = batch_shape;
        shape.push(m);
        shape.push(n);
        Self { shape, data }
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let base = parts[0].shape();
        for p in parts {
            assert_eq!(p.ndim(), base.len(), "concat rank mismatch");
            for (d, (&x, &y)) in p.shape().iter().zip(base).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {:?} vs {:?}", p.shape(), base);
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        Self { shape, data }
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Self {
        let (outer, full, inner) = split_axis(&self.shape, axis);
        assert!(start + len <= full, "slice {start}+{len} exceeds {full} on axis {axis}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self { shape, data }
    }

    /// Adjoint of [`Tensor::slice`]: embeds `self` into zeros of extent `full`.
    pub(crate) fn unslice(&self, axis: usize, start: usize, full: usize) -> Self {
        let (outer, len, inner) = split_axis(&self.shape, axis);
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut out = Self::zeros(&shape);
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            out.data[dst..dst + len * inner].copy_from_slice(&self.data[o * len * inner..(o + 1) * len * inner]);
        }
        out
    }

    /// Gathers rows (sub-tensors along axis 0).
    pub fn index_select(&self, indices: &[usize]) -> Self {
        let rows = self.shape[0];
        let w = self.data.len() / rows.max(1);
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            assert!(i < rows, "index {i} out of range for {rows} rows");
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Adjoint of [`Tensor::index_select`]: scatter-adds rows into `rows` slots.
    pub(crate) fn index_add(&self, indices: &[usize], rows: usize) -> Self {
        let w = self.data.len() / indices.len().max(1);
        let mut shape = self.shape.clone();
        shape[0] = rows;
        let mut out = Self::zeros(&shape);
        for (r, &i) in indices.iter().enumerate() {
            for (d, &s) in out.data[i * w..(i + 1) * w].iter_mut().zip(&self.data[r * w..(r + 1) * w]) {
                *d += s;
            }
        }
        out
    }
}
