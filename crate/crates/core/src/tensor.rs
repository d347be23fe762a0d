//! Dense row-major image tensors.
//!
//! An [`ImageTensor`] holds either a single image (`H × W × C`) or an image
//! sequence (`T × H × W × C`). Two-axis tensors are read as single-band
//! images. The batch axis is never stored; batches are iterated.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_AXES: usize = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("tensor must have 1 to {MAX_AXES} axes, got {0}")]
    BadRank(usize),
    #[error("tensor axis {axis} has zero length")]
    ZeroAxis { axis: usize },
    #[error("tensor data length {got} does not match dims product {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

/// How a tensor's axes are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Image { height: usize, width: usize, channels: usize },
    Sequence { frames: usize, height: usize, width: usize, channels: usize },
}

impl ImageTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > MAX_AXES {
            return Err(TensorError::BadRank(dims.len()));
        }
        if let Some(axis) = dims.iter().position(|&d| d == 0) {
            return Err(TensorError::ZeroAxis { axis });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch { expected, got: data.len() });
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    /// Builds an `H × W × C` image from a closure over `(row, col, band)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for r in 0..height {
            for c in 0..width {
                for b in 0..channels {
                    data.push(f(r, c, b));
                }
            }
        }
        Self { dims: vec![height, width, channels], data }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the axes as an image or a sequence; `None` for 1- and 5-axis tensors.
    pub fn layout(&self) -> Option<Layout> {
        match *self.dims.as_slice() {
            [height, width] => Some(Layout::Image { height, width, channels: 1 }),
            [height, width, channels] => Some(Layout::Image { height, width, channels }),
            [frames, height, width, channels] => Some(Layout::Sequence { frames, height, width, channels }),
            _ => None,
        }
    }

    /// Value at `(row, col, band)` of an image tensor.
    pub fn pixel(&self, row: usize, col: usize, band: usize) -> f32 {
        let (w, c) = match self.layout() {
            Some(Layout::Image { width, channels, .. }) => (width, channels),
            _ => panic!("pixel() on non-image tensor with dims {:?}", self.dims),
        };
        self.data[(row * w + col) * c + band]
    }

    /// Stacks equally sized images into a `T × H × W × C` sequence.
    pub fn stack_frames(frames: &[ImageTensor]) -> Result<Self, TensorError> {
        let first = frames.first().ok_or(TensorError::BadRank(0))?;
        let (h, w, c) = match first.layout() {
            Some(Layout::Image { height, width, channels }) => (height, width, channels),
            _ => return Err(TensorError::BadRank(first.dims.len() + 1)),
        };
        let mut data = Vec::with_capacity(frames.len() * first.len());
        for f in frames {
            if f.len() != first.len() {
                return Err(TensorError::LengthMismatch { expected: first.len(), got: f.len() });
            }
            data.extend_from_slice(&f.data);
        }
        Self::new(vec![frames.len(), h, w, c], data)
    }
}
