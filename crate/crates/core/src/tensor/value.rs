use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array with shared storage and explicit strides.
///
/// Permutations are views over the same buffer; anything that needs a flat
/// row-major slice goes through [`Tensor::values`], which materializes on
/// demand.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    data: Arc<Vec<T>>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if let Some(ax) = shape.iter().position(|&e| e == 0) {
            return Err(dim_err!("extent {ax} of shape {shape:?} is zero"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {n} values but {} were supplied",
                data.len()
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let strides = row_major_strides(&shape);
        Tensor {
            data: Arc::new(data),
            shape,
            strides,
            offset: 0,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_real(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
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
        self.strides == row_major_strides(&self.shape)
    }

    /// Flat row-major slice, when the layout already is one.
    pub fn as_slice(&self) -> Option<&[T]> {
        if self.is_contiguous() {
            Some(&self.data[self.offset..self.offset + self.numel()])
        } else {
            None
        }
    }

    /// Row-major values, borrowing when possible.
    pub fn values(&self) -> Cow<'_, [T]> {
        match self.as_slice() {
            Some(s) => Cow::Borrowed(s),
            None => Cow::Owned(self.gather_strided()),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values().into_owned()
    }

    pub fn contiguous(&self) -> Self {
        if self.is_contiguous() {
            self.clone()
        } else {
            Self::from_parts(self.shape.clone(), self.gather_strided())
        }
    }

    fn gather_strided(&self) -> Vec<T> {
        let n = self.numel();
        let rank = self.rank();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut pos = self.offset;
        for _ in 0..n {
            out.push(self.data[pos]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                pos += self.strides[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                pos -= self.strides[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
        out
    }

    pub fn get(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let pos = index
            .iter()
            .zip(&self.strides)
            .zip(&self.shape)
            .map(|((&i, &s), &e)| {
                assert!(i < e, "index {i} out of extent {e}");
                i * s
            })
            .sum::<usize>();
        self.data[self.offset + pos]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[self.offset]
    }

    /// Reorders axes without copying: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        check_permutation(axes, self.rank())?;
        Ok(Tensor {
            data: Arc::clone(&self.data),
            shape: axes.iter().map(|&a| self.shape[a]).collect(),
            strides: axes.iter().map(|&a| self.strides[a]).collect(),
            offset: self.offset,
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(dim_err!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        let base = self.contiguous();
        Ok(Tensor {
            data: base.data,
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            offset: base.offset,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.values().iter().map(|&v| f(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.values().iter().map(|&v| U::from_real(v.to_real())).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (T, T) {
        let vals = self.values();
        vals.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn sum(&self) -> T {
        self.values().iter().copied().sum()
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(dim_err!(
                "shape {:?} vs {:?}",
                self.shape,
                other.shape
            ));
        }
        let (a, b) = (self.values(), other.values());
        Ok(a.iter()
            .zip(b.iter())
            .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs())))
    }
}

pub(crate) fn check_permutation(axes: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if axes.len() != rank {
        return Err(dim_err!("permutation {axes:?} does not cover rank {rank}"));
    }
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(dim_err!("invalid permutation {axes:?}"));
        }
        seen[a] = true;
    }
    Ok(())
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values() == other.values()
    }
}
