//! Dense row-major tensors.
//!
//! Values are immutable once constructed (`Arc` storage, O(1) clone), which
//! makes them freely shareable across threads and lets the autodiff tape keep
//! saved activations without copying. All mutation happens on a `Vec` before
//! it is frozen into a tensor.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

#[derive(Clone)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<[F]>,
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, &self.data[..])
        } else {
            write!(
                f,
                "Tensor{:?} [{:?}, {:?}, ... ({} elements)]",
                self.shape,
                self.data[0],
                self.data[1],
                self.data.len()
            )
        }
    }
}

fn shape_error(op: &'static str, detail: String) -> CoreError {
    CoreError::Shape { op, detail }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Decompose a shape around `axis` into (outer, axis_len, inner) so that the
/// linear offset of (o, a, i) is (o * axis_len + a) * inner + i.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_error(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, expected, data.len()),
            ));
        }
        Ok(Self { shape, data: data.into() })
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn scalar(v: F) -> Self {
        Self { shape: vec![], data: vec![v].into() }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![F::zero(); n].into() }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n].into() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    /// Scalar view of a 0-d or single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> F {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = strides_of(&self.shape);
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        let data: Vec<F> = self.data.iter().map(|&v| f(v)).collect();
        Self { shape: self.shape.clone(), data: data.into() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_error(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data: Vec<F> = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data: data.into() })
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn frobenius_norm(&self) -> F {
        self.data.iter().map(|&v| v * v).sum::<F>().sqrt()
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_error(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Self { shape, data: Arc::clone(&self.data) })
    }

    pub fn transpose2d(&self) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(shape_error("transpose2d", format!("expected 2 axes, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out.into() })
    }

    /// 2-D matrix product. Rows of the output are computed independently, so
    /// the rayon split never changes the summation order of any element.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.ndim() != 2 || rhs.ndim() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(shape_error(
                "matmul",
                format!("{:?} x {:?}", self.shape, rhs.shape),
            ));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![F::zero(); m * n];
        let a = &self.data;
        let b = &rhs.data;

        let row = |i: usize, out_row: &mut [F]| {
            let a_row = &a[i * k..(i + 1) * k];
            for (kk, &aik) in a_row.iter().enumerate() {
                if aik != F::zero() {
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bkj) in out_row.iter_mut().zip(b_row.iter()) {
                        *o = *o + aik * bkj;
                    }
                }
            }
        };

        if m * k * n >= 1 << 16 && m > 1 {
            use rayon::prelude::*;
            out.par_chunks_mut(n).enumerate().for_each(|(i, out_row)| row(i, out_row));
        } else {
            for (i, out_row) in out.chunks_mut(n).enumerate() {
                row(i, out_row);
            }
        }
        Ok(Self { shape: vec![m, n], data: out.into() })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(shape_error(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, self.shape),
            ));
        }
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data: out.into() })
    }

    /// Adds `src` into a copy of `self` at the `narrow(axis, start, ..)` window.
    pub fn add_at_narrow(&self, axis: usize, start: usize, src: &Self) -> Result<Self> {
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        let len = src.shape[axis];
        let mut out = self.data.to_vec();
        for o in 0..outer {
            let dst_base = (o * axis_len + start) * inner;
            let src_base = o * len * inner;
            for t in 0..len * inner {
                out[dst_base + t] += src.data[src_base + t];
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out.into() })
    }

    pub fn concat(axis: usize, parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(shape_error("concat", "no parts".into()));
        }
        let first = parts[0];
        if axis >= first.ndim() {
            return Err(shape_error("concat", format!("axis {axis} of {:?}", first.shape)));
        }
        for p in parts {
            if p.ndim() != first.ndim()
                || p.shape.iter().zip(&first.shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_error(
                    "concat",
                    format!("incompatible {:?} vs {:?}", p.shape, first.shape),
                ));
            }
        }
        let total_axis: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let (outer, _, inner) = axis_split(&first.shape, axis);
        let mut shape = first.shape.clone();
        shape[axis] = total_axis;
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let alen = p.shape[axis];
                let base = o * alen * inner;
                out.extend_from_slice(&p.data[base..base + alen * inner]);
            }
        }
        Ok(Self { shape, data: out.into() })
    }

    /// out[.., j, ..] = self[.., indices[j], ..] along `axis`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(shape_error("index_select", format!("axis {axis} of {:?}", self.shape)));
        }
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        for &i in indices {
            if i >= axis_len {
                return Err(CoreError::Input(format!(
                    "index {i} out of range for axis of length {axis_len}"
                )));
            }
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * axis_len + i) * inner;
                out.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self { shape, data: out.into() })
    }

    /// Adjoint of `index_select`: scatter-add rows of `grad` back into a
    /// zero tensor of shape `self.shape` (self provides only the shape).
    pub fn scatter_add_index(base_shape: &[usize], axis: usize, indices: &[usize], grad: &Self) -> Self {
        let (outer, axis_len, inner) = axis_split(base_shape, axis);
        let mut out = vec![F::zero(); base_shape.iter().product()];
        for o in 0..outer {
            for (j, &i) in indices.iter().enumerate() {
                let src = (o * indices.len() + j) * inner;
                let dst = (o * axis_len + i) * inner;
                for t in 0..inner {
                    out[dst + t] += grad.data[src + t];
                }
            }
        }
        Self { shape: base_shape.to_vec(), data: out.into() }
    }

    /// out[i] = self[i, idx[i]] for a 2-D tensor.
    pub fn take_per_row(&self, idx: &[usize]) -> Result<Self> {
        if self.ndim() != 2 || idx.len() != self.shape[0] {
            return Err(shape_error(
                "take_per_row",
                format!("{:?} with {} indices", self.shape, idx.len()),
            ));
        }
        let cols = self.shape[1];
        let mut out = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= cols {
                return Err(CoreError::Input(format!("column {j} out of range {cols}")));
            }
            out.push(self.data[i * cols + j]);
        }
        Ok(Self { shape: vec![idx.len()], data: out.into() })
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(shape_error("sum_axis", format!("axis {axis} of {:?}", self.shape)));
        }
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for t in 0..inner {
                    out[o * inner + t] += self.data[base + t];
                }
            }
        }
        let mut shape = self.shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Self { shape, data: out.into() })
    }

    /// Max along an axis (keepdim) plus flat argmax indices into the axis.
    /// Ties resolve to the smallest index.
    pub fn max_axis(&self, axis: usize) -> Result<(Self, Vec<usize>)> {
        if axis >= self.ndim() {
            return Err(shape_error("max_axis", format!("axis {axis} of {:?}", self.shape)));
        }
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        if axis_len == 0 {
            return Err(shape_error("max_axis", "empty axis".into()));
        }
        let mut out = vec![F::neg_infinity(); outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for t in 0..inner {
                    let v = self.data[base + t];
                    if v > out[o * inner + t] {
                        out[o * inner + t] = v;
                        arg[o * inner + t] = a;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok((Self { shape, data: out.into() }, arg))
    }

    pub fn cumsum(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(shape_error("cumsum", format!("axis {axis} of {:?}", self.shape)));
        }
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        let mut out = self.data.to_vec();
        for o in 0..outer {
            for a in 1..axis_len {
                let prev = (o * axis_len + a - 1) * inner;
                let cur = (o * axis_len + a) * inner;
                for t in 0..inner {
                    out[cur + t] = out[cur + t] + out[prev + t];
                }
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out.into() })
    }

    /// Suffix sums along an axis (the adjoint of cumsum).
    pub fn cumsum_rev(&self, axis: usize) -> Result<Self> {
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        let mut out = self.data.to_vec();
        for o in 0..outer {
            for a in (0..axis_len.saturating_sub(1)).rev() {
                let next = (o * axis_len + a + 1) * inner;
                let cur = (o * axis_len + a) * inner;
                for t in 0..inner {
                    out[cur + t] = out[cur + t] + out[next + t];
                }
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out.into() })
    }

    /// Numerically stable softmax along an axis (max subtraction).
    pub fn softmax_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(shape_error("softmax", format!("axis {axis} of {:?}", self.shape)));
        }
        let (outer, axis_len, inner) = axis_split(&self.shape, axis);
        let mut out = vec![F::zero(); self.data.len()];
        for o in 0..outer {
            for t in 0..inner {
                let mut mx = F::neg_infinity();
                for a in 0..axis_len {
                    mx = mx.max(self.data[(o * axis_len + a) * inner + t]);
                }
                let mut denom = F::zero();
                for a in 0..axis_len {
                    let e = (self.data[(o * axis_len + a) * inner + t] - mx).exp();
                    out[(o * axis_len + a) * inner + t] = e;
                    denom += e;
                }
                for a in 0..axis_len {
                    out[(o * axis_len + a) * inner + t] = out[(o * axis_len + a) * inner + t] / denom;
                }
            }
        }
        Ok(Self { shape: self.shape.clone(), data: out.into() })
    }

    /// Causal depthwise 1-D convolution over the time axis.
    /// x: [T, d], kernel: [d, k]; out[t, c] = sum_j kernel[c, j] * x[t-k+1+j, c]
    /// with indices below zero reading as zero.
    pub fn conv1d_depthwise(&self, kernel: &Self) -> Result<Self> {
        if self.ndim() != 2 || kernel.ndim() != 2 || self.shape[1] != kernel.shape[0] {
            return Err(shape_error(
                "conv1d_depthwise",
                format!("x {:?} kernel {:?}", self.shape, kernel.shape),
            ));
        }
        let (t_len, d) = (self.shape[0], self.shape[1]);
        let k = kernel.shape[1];
        if k < 1 {
            return Err(CoreError::Config("conv kernel size must be >= 1".into()));
        }
        let mut out = vec![F::zero(); t_len * d];
        for t in 0..t_len {
            for j in 0..k {
                // source time index t - (k-1) + j
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    out[t * d + c] += kernel.data[c * k + j] * self.data[src * d + c];
                }
            }
        }
        Ok(Self { shape: vec![t_len, d], data: out.into() })
    }

    /// Gradient of conv1d_depthwise w.r.t. the input.
    pub fn conv1d_depthwise_grad_input(grad: &Self, kernel: &Self) -> Self {
        let (t_len, d) = (grad.shape[0], grad.shape[1]);
        let k = kernel.shape[1];
        let mut out = vec![F::zero(); t_len * d];
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    out[src * d + c] += kernel.data[c * k + j] * grad.data[t * d + c];
                }
            }
        }
        Self { shape: vec![t_len, d], data: out.into() }
    }

    /// Gradient of conv1d_depthwise w.r.t. the kernel.
    pub fn conv1d_depthwise_grad_kernel(grad: &Self, input: &Self, k: usize) -> Self {
        let (t_len, d) = (input.shape[0], input.shape[1]);
        let mut out = vec![F::zero(); d * k];
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize - (k as isize - 1) + j as isize;
                if src < 0 {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    out[c * k + j] += grad.data[t * d + c] * input.data[src * d + c];
                }
            }
        }
        Self { shape: vec![d, k], data: out.into() }
    }
}

// -- broadcasting -------------------------------------------------------------

/// Numpy-style broadcast of two shapes (align trailing axes; a dimension
/// matches if equal or one side is 1).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return Err(shape_error(
                "broadcast",
                format!("cannot broadcast {a:?} with {b:?}"),
            ));
        }
    }
    Ok(out)
}

/// Strides for reading a tensor of `shape` as if broadcast to `out_shape`
/// (stride 0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    if b.data.len() == 1 {
        let s = b.data[0];
        return Ok(a.map(|v| f(v, s)));
    }
    if a.data.len() == 1 {
        let s = a.data[0];
        return Ok(b.map(|v| f(s, v)));
    }
    let out_shape = broadcast_shapes(&a.shape, &b.shape)?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a.data[oa], b.data[ob]));
        // odometer increment
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_vec(out_shape, out)
}

impl<F: Scalar> Tensor<F> {
    /// Materialize this tensor broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let out_shape = broadcast_shapes(self.shape(), shape)?;
        if out_shape != shape {
            return Err(shape_error(
                "broadcast_to",
                format!("{:?} does not broadcast to {:?}", self.shape, shape),
            ));
        }
        let st = broadcast_strides(&self.shape, &out_shape);
        let n: usize = out_shape.iter().product();
        let mut idx = vec![0usize; out_shape.len()];
        let mut off = 0usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.data[off]);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                off += st[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= st[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        Tensor::from_vec(out_shape, out)
    }
}

/// Sum `grad` down to `target_shape` (the adjoint of broadcasting).
pub fn reduce_to_shape<F: Scalar>(grad: &Tensor<F>, target_shape: &[usize]) -> Tensor<F> {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let st = broadcast_strides(target_shape, &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = vec![F::zero(); target_shape.iter().product()];
    let mut idx = vec![0usize; out_shape.len()];
    let mut ot = 0usize;
    for lin in 0..n {
        out[ot] += grad.data[lin];
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            ot += st[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ot -= st[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor { shape: target_shape.to_vec(), data: out.into() }
}
