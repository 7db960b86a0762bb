//! Minimal strided tensors with a dynamic reverse-mode autodiff tape.
//!
//! [`Tensor`] is an immutable n-dimensional view over shared storage.
//! Differentiable computation happens on a [`Tape`]: leaves are registered
//! with [`Tape::leaf`], every op appends a node, and [`Tape::backward`]
//! walks the record in reverse once.

mod conv;
mod ops;
mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use ops::{BatchNormStats, NormMode};
pub use tape::{BackwardReport, Tape, Var};

/// Strided n-dimensional array. Cloning is cheap; storage is shared.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
    data: Arc<Vec<T>>,
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    if axes.len() != rank {
        return Err(Error::Config(format!(
            "permutation {axes:?} has length {} but tensor rank is {rank}",
            axes.len()
        )));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::Config(format!(
                "{axes:?} is not a permutation of 0..{rank}"
            )));
        }
        seen[a] = true;
    }
    Ok(())
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            offset: 0,
            data: Arc::new(data),
        })
    }

    /// 0-dimensional tensor.
    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            strides: Vec::new(),
            offset: 0,
            data: Arc::new(vec![value]),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel]).expect("positive extents")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    /// Builds a contiguous tensor by evaluating `f` at every multi-index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let numel: usize = shape.iter().product();
        let mut index = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f(&index));
            for axis in (0..shape.len()).rev() {
                index[axis] += 1;
                if index[axis] < shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
        Self::from_vec(shape, data).expect("positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_contiguous(&self) -> bool {
        self.offset == 0
            && self.data.len() == self.numel()
            && self.strides == row_major_strides(&self.shape)
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        self.offset
            + index
                .iter()
                .zip(&self.strides)
                .map(|(i, s)| i * s)
                .sum::<usize>()
    }

    /// Element at a multi-index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        assert!(
            index.len() == self.rank() && index.iter().zip(&self.shape).all(|(i, d)| i < d),
            "index {index:?} out of bounds for shape {:?}",
            self.shape
        );
        self.data[self.flat_index(index)]
    }

    /// Value of a 0-dimensional or single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a tensor with shape {:?}", self.shape);
        self.data[self.offset]
    }

    /// Logical elements in row-major order.
    pub fn to_vec(&self) -> Vec<T> {
        if self.is_contiguous() {
            return self.data.as_ref().clone();
        }
        let numel = self.numel();
        let mut out = Vec::with_capacity(numel);
        let mut index = vec![0usize; self.rank()];
        let mut pos = self.offset;
        for _ in 0..numel {
            out.push(self.data[pos]);
            for axis in (0..self.rank()).rev() {
                index[axis] += 1;
                pos += self.strides[axis];
                if index[axis] < self.shape[axis] {
                    break;
                }
                pos -= self.strides[axis] * self.shape[axis];
                index[axis] = 0;
            }
        }
        out
    }

    /// Contiguous storage, if this tensor is not a strided view.
    pub fn as_slice(&self) -> Option<&[T]> {
        self.is_contiguous().then(|| self.data.as_slice())
    }

    pub fn contiguous(&self) -> Self {
        if self.is_contiguous() {
            return self.clone();
        }
        Self::from_vec(&self.shape, self.to_vec()).expect("same element count")
    }

    /// View with axes reordered: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.rank())?;
        Ok(Self {
            shape: axes.iter().map(|&a| self.shape[a]).collect(),
            strides: axes.iter().map(|&a| self.strides[a]).collect(),
            offset: self.offset,
            data: Arc::clone(&self.data),
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        let base = self.contiguous();
        Ok(Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            offset: 0,
            data: base.data,
        })
    }

    /// View of `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::Index(format!(
                "narrow(axis {axis}, {start}..{}) outside shape {:?}",
                start + len,
                self.shape
            )));
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self {
            shape,
            strides: self.strides.clone(),
            offset: self.offset + start * self.strides[axis],
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.to_vec().into_iter().map(f).collect();
        Self::from_vec(&self.shape, data).expect("same shape")
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let data = self.to_vec().into_iter().map(|x| U::of(x.as_f64())).collect();
        Tensor::from_vec(&self.shape, data).expect("same shape")
    }

    /// Bitwise/elementwise equality of logical contents.
    pub fn values_eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.to_vec() == other.to_vec()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.to_vec()
            .into_iter()
            .zip(other.to_vec())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}
