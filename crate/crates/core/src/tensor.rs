//! Dense row-major tensors of `f64` and the shape arithmetic shared by the
//! graph operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{fmt_shape, Error, Result};

/// A dense row-major array of real values.
///
/// `data.len()` always equals the product of `shape`. A rank-0 tensor has an
/// empty shape and one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", alloc::format!("zero-sized dim in {}", fmt_shape(&shape))));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                alloc::format!("shape {} needs {} values, got {}", fmt_shape(&shape), n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    /// Vector of length `data.len()`.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::shape("item", alloc::format!("expected one element, shape {}", fmt_shape(&self.shape))))
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Flat view of `rows` contiguous rows of the trailing dimension.
    pub fn rows(&self) -> core::slice::ChunksExact<'_, f64> {
        let n = *self.shape.last().unwrap_or(&1);
        self.data.chunks_exact(n)
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shapes("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Slice `index` along axis 0, dropping that axis.
    pub fn index0(&self, index: usize) -> Result<Self> {
        if self.shape.is_empty() || index >= self.shape[0] {
            return Err(Error::shape("index0", alloc::format!("index {index} out of {}", fmt_shape(&self.shape))));
        }
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 { Vec::new() } else { self.shape[1..].to_vec() };
        Ok(Tensor { shape, data: self.data[index * inner..(index + 1) * inner].to_vec() })
    }

    /// Stack equal-shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shapes("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-dimension broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (zero where
/// the dimension is broadcast).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { own[i - off] })
        .collect()
}

/// Source offsets of every element of `out` for an operand with the given
/// broadcast strides, in row-major order of `out`.
pub(crate) fn broadcast_offsets(bstrides: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let mut offs = Vec::with_capacity(n);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        offs.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += bstrides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= bstrides[ax] * out[ax];
            idx[ax] = 0;
        }
    }
    offs
}

/// Sum `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let bs = broadcast_strides(shape, grad.shape());
    let offs = broadcast_offsets(&bs, grad.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    for (g, o) in grad.data().iter().zip(offs) {
        out.data[o] += g;
    }
    out
}

/// Split a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_aligns_trailing_dims() {
        assert_eq!(broadcast_shape(&[4, 1, 3], &[5, 3]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
    }

    #[test]
    fn broadcast_offsets_repeat_rows() {
        let out = [2, 3];
        let bs = broadcast_strides(&[3], &out);
        assert_eq!(broadcast_offsets(&bs, &out), vec![0, 1, 2, 0, 1, 2]);
        let bs = broadcast_strides(&[2, 1], &out);
        assert_eq!(broadcast_offsets(&bs, &out), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn reduce_sums_broadcast_axes() {
        let g = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(reduce_to_shape(&g, &[3]).data(), &[5., 7., 9.]);
        assert_eq!(reduce_to_shape(&g, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(reduce_to_shape(&g, &[]).data(), &[21.]);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
    }
}
