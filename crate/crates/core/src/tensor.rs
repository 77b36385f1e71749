//! Dense row-major `f32` tensors.
//!
//! Images and feature maps are stored as `[rows, cols, channels]`; conv
//! kernels as `[out, in, k, k]`. A [`Tensor`] can only be constructed from
//! finite data and is never mutated in place by the public API.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking the rank, the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Shape(format!(
                "rank {} exceeds the maximum of {MAX_RANK}",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len]).expect("zeros are finite")
    }

    /// Fills a tensor by calling `f` with each flat index.
    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f32) -> Result<Self> {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Interprets the tensor as a `[rows, cols, channels]` map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Shape(format!(
                "expected a rows x cols x channels map, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element of a rank-3 tensor. Panics on out-of-range indices.
    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        let (_, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        debug_assert!(j < w && k < c);
        self.data[(i * w + j) * c + k]
    }

    /// Returns true when every element lies in `[lo, hi]`.
    pub fn within(&self, lo: f32, hi: f32) -> bool {
        self.data.iter().all(|&v| (lo..=hi).contains(&v))
    }

    /// Crate-internal constructor for data already known to be finite.
    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Tensor { shape, data }
    }

    pub(crate) fn data_mut_unchecked(&mut self) -> &mut [f32] {
        &mut self.data
    }
}
