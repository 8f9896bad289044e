//! Channel-major image arrays.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A `C x H x W` image stored channel-major in double precision.
///
/// Clean images hold values in `[0, 1]`; noisy intermediates are unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::EmptyInput);
        }
        if data.len() != shape.len() {
            return Err(Error::LengthMismatch {
                expected: shape.len(),
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        assert!(!shape.is_empty(), "image shape must be non-empty");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(c, y, x);
        self.data[i] = value;
    }

    #[inline]
    fn index(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.shape.channels && y < self.shape.height && x < self.shape.width);
        (c * self.shape.height + y) * self.shape.width + x
    }

    /// Pixels of channel `c` in row-major order.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Copy of channel `c` as a single-channel image.
    pub fn channel_image(&self, c: usize) -> ImageTensor {
        ImageTensor {
            shape: Shape::new(1, self.shape.height, self.shape.width),
            data: self.channel(c).to_vec(),
        }
    }

    pub fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected,
                found: self.shape,
            });
        }
        Ok(())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> ImageTensor {
        ImageTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip_map(&self, other: &ImageTensor, mut f: impl FnMut(f64, f64) -> f64) -> Result<ImageTensor> {
        other.ensure_shape(self.shape)?;
        Ok(ImageTensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    /// `||self - other||_2`.
    pub fn l2_distance(&self, other: &ImageTensor) -> Result<f64> {
        other.ensure_shape(self.shape)?;
        let sq: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(libm::sqrt(sq))
    }

    /// Channels reordered so that output channel `i` is input channel `order[i]`.
    pub fn permute_channels(&self, order: &[usize]) -> Result<ImageTensor> {
        if order.len() != self.shape.channels {
            return Err(Error::LengthMismatch {
                expected: self.shape.channels,
                found: order.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        for &c in order {
            if c >= self.shape.channels {
                return Err(Error::InvalidParameter(alloc::format!("channel {c} out of range")));
            }
            data.extend_from_slice(self.channel(c));
        }
        Ok(ImageTensor {
            shape: self.shape,
            data,
        })
    }
}
