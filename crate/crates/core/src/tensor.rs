//! Dense `f32` tensor with an explicit shape.
//!
//! Images and activations use NCHW layout. Tensors are values: operations
//! return new tensors and never mutate their inputs.

use std::fmt;

use thiserror::Error;

/// Errors raised by shape checks in the numeric kernels.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("tensor rank must be 1..=4, got {0}")]
    Rank(usize),
    #[error("shape {shape:?} has a zero dimension")]
    ZeroDim { shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        len: usize,
        expected: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    WrongRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {what} mismatch ({lhs} vs {rhs})")]
    DimMismatch {
        op: &'static str,
        what: &'static str,
        lhs: usize,
        rhs: usize,
    },
    #[error("{op}: kernel {kernel} does not fit input {height}x{width} (padding {padding})")]
    KernelTooLarge {
        op: &'static str,
        kernel: usize,
        height: usize,
        width: usize,
        padding: usize,
    },
    #[error("{op}: {what} must be positive")]
    NonPositive {
        op: &'static str,
        what: &'static str,
    },
    #[error("{op}: shapes differ ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self, ShapeError> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(ShapeError::DataLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self, ShapeError> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Result<Self, ShapeError> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(
        shape: impl Into<Vec<usize>>,
        f: impl FnMut(usize) -> f32,
    ) -> Result<Self, ShapeError> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape,
            data: (0..n).map(f).collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self, ShapeError> {
        Self::new(shape, self.data)
    }

    /// Splits a rank-4 shape into `(n, c, h, w)`.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize), ShapeError> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(ShapeError::WrongRank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), ShapeError> {
        match *self.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(ShapeError::WrongRank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Self, ShapeError> {
        if self.shape != other.shape {
            return Err(ShapeError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, ShapeError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self, ShapeError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Self {
        self.map(|x| x * factor)
    }

    /// Copies out channel `c` of batch item 0 as a `1x1xHxW` tensor.
    pub fn channel(&self, c: usize) -> Result<Self, ShapeError> {
        let (_, channels, h, w) = self.dims4("channel")?;
        if c >= channels {
            return Err(ShapeError::DimMismatch {
                op: "channel",
                what: "channel index",
                lhs: c,
                rhs: channels,
            });
        }
        let plane = h * w;
        Ok(Self {
            shape: vec![1, 1, h, w],
            data: self.data[c * plane..(c + 1) * plane].to_vec(),
        })
    }

    /// Multiplies every channel of an `NxCxHxW` tensor by a `1x1xHxW` mask.
    pub fn mul_spatial_mask(&self, mask: &Tensor) -> Result<Self, ShapeError> {
        let (n, c, h, w) = self.dims4("mul_spatial_mask")?;
        let (mn, mc, mh, mw) = mask.dims4("mul_spatial_mask")?;
        if mn != 1 || mc != 1 || mh != h || mw != w {
            return Err(ShapeError::ShapeMismatch {
                op: "mul_spatial_mask",
                lhs: self.shape.clone(),
                rhs: mask.shape.clone(),
            });
        }
        let plane = h * w;
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(plane).take(n * c) {
            for (x, &m) in chunk.iter_mut().zip(&mask.data) {
                *x *= m;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Index of the largest element; the first one wins on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

fn validate_shape(shape: &[usize]) -> Result<(), ShapeError> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(ShapeError::Rank(shape.len()));
    }
    if shape.contains(&0) {
        return Err(ShapeError::ZeroDim {
            shape: shape.to_vec(),
        });
    }
    Ok(())
}
