//! Dense row-major `f64` tensors and the primitive numeric operations the
//! rest of the crate is built on.
//!
//! Tensors are plain values: every operation returns a new tensor and
//! never mutates its inputs. There is no broadcasting except against a
//! scalar operand, and every shape disagreement is reported as
//! [`Error::InvalidShape`] naming both shapes.

mod io;
mod rng;

pub use io::{decode_tsr, encode_tsr, read_tsr, write_tsr, DType, TsrTensor, TSR_MAGIC};
pub use rng::Rng;

use crate::error::{Error, Result};
use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Axis selection for reductions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    Some(Vec<usize>),
}

impl From<usize> for Axes {
    fn from(axis: usize) -> Self {
        Axes::Some(vec![axis])
    }
}

impl From<&[usize]> for Axes {
    fn from(axes: &[usize]) -> Self {
        Axes::Some(axes.to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 16;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " {:?}...", &self.data[..SHOWN])
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Construction from trusted internal kernels; panics on mismatch.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], data)
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Self::from_parts(vec![values.len()], values.to_vec())
    }

    /// 2-D tensor from rows of equal length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged matrix rows"));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let off: usize = index.iter().zip(strides(&self.shape)).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "elementwise")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    pub fn neg(&self) -> Tensor {
        self.map(|v| -v)
    }

    /// In-place `self += alpha * other`.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Matrix product of two rank-2 tensors. Each output entry sums over the
    /// shared extent strictly left to right.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} · {:?}",
                self.shape, other.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean_all(&self) -> f64 {
        self.sum_all() / self.numel() as f64
    }

    pub fn max_all(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub(crate) fn resolve_axes(&self, axes: &Axes) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.rank()];
        match axes {
            Axes::All => mask.iter_mut().for_each(|m| *m = true),
            Axes::Some(list) => {
                for &a in list {
                    if a >= self.rank() {
                        return Err(Error::InvalidAxis { axis: a, rank: self.rank() });
                    }
                    mask[a] = true;
                }
            }
        }
        Ok(mask)
    }

    /// Reduces over `axes`, removing them from the shape. Reducing every
    /// axis yields a scalar.
    pub fn reduce(&self, op: Reduce, axes: impl Into<Axes>) -> Result<Tensor> {
        let mask = self.resolve_axes(&axes.into())?;
        let out_shape: Vec<usize> = self
            .shape
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| !m)
            .map(|(&e, _)| e)
            .collect();
        let out_n = numel(&out_shape);
        let count = (self.numel() / out_n) as f64;
        let init = match op {
            Reduce::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut out = vec![init; out_n];
        let map = reduction_index_map(&self.shape, &mask);
        for (i, &v) in self.data.iter().enumerate() {
            let o = &mut out[map[i]];
            match op {
                Reduce::Max => *o = o.max(v),
                _ => *o += v,
            }
        }
        if op == Reduce::Mean {
            out.iter_mut().for_each(|v| *v /= count);
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor::from_parts(shape, self.data.clone()))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        self.permute(&[1, 0])
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {r}")));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for ax in (0..r).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Flattens a `C×H×W` feature map into `H·W` tokens of dimension `C`,
    /// visiting spatial positions in row-major raster order.
    pub fn flatten_tokens(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(format!("flatten_tokens needs C×H×W, got {:?}", self.shape)));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.reshape(vec![c, h * w])?.transpose()
    }

    /// Inverse of [`Tensor::flatten_tokens`].
    pub fn unflatten_tokens(&self, h: usize, w: usize) -> Result<Tensor> {
        if self.rank() != 2 || self.shape[0] != h * w {
            return Err(Error::shape(format!(
                "unflatten_tokens {:?} into {h}×{w}",
                self.shape
            )));
        }
        let c = self.shape[1];
        self.transpose()?.reshape(vec![c, h, w])
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::InvalidAxis { axis, rank: r });
        }
        for p in parts {
            let ok = p.rank() == r
                && (0..r).all(|a| a == axis || p.shape[a] == first.shape[a]);
            if !ok {
                return Err(Error::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_parts(shape, out))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) on axis {axis} of {:?}",
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Index of the maximum along `axis` (first one wins ties), axis removed.
    pub fn argmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidAxis { axis, rank: self.rank() });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let ext = self.shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for a in 0..ext {
                    let v = self.data[(o * ext + a) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = a;
                    }
                }
                out[o * inner + i] = best as f64;
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }
}

/// For each flat input index, the flat output index after dropping the
/// masked axes.
pub(crate) fn reduction_index_map(shape: &[usize], mask: &[bool]) -> Vec<usize> {
    let kept: Vec<usize> = shape
        .iter()
        .zip(mask)
        .map(|(&e, &m)| if m { 1 } else { e })
        .collect();
    let out_strides = strides(&kept);
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        let o: usize = idx
            .iter()
            .zip(mask)
            .zip(&out_strides)
            .map(|((&i, &m), &s)| if m { 0 } else { i * s })
            .sum();
        map.push(o);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Broadcasts a reduced tensor back over the axes removed by
/// [`Tensor::reduce`]; the adjoint of a sum reduction.
pub(crate) fn expand_reduced(reduced: &Tensor, full_shape: &[usize], axes: &Axes) -> Result<Tensor> {
    let probe = Tensor::from_parts(full_shape.to_vec(), vec![0.0; numel(full_shape)]);
    let mask = probe.resolve_axes(axes)?;
    let map = reduction_index_map(full_shape, &mask);
    Ok(Tensor::from_parts(
        full_shape.to_vec(),
        map.iter().map(|&o| reduced.data[o]).collect(),
    ))
}
