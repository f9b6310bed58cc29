use serde::{Deserialize, Serialize};

use crate::error::{Result, TcnError};
use crate::real::Real;

/// A channels-by-length array stored row-major (channel `c` occupies
/// `data[c*len .. (c+1)*len]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor1<T> {
    data: Vec<T>,
    channels: usize,
    len: usize,
}

impl<T: Real> Tensor1<T> {
    pub fn new(data: Vec<T>, channels: usize, len: usize) -> Result<Self> {
        if data.len() != channels * len {
            return Err(TcnError::shape(format!(
                "{} values cannot fill a {channels}x{len} tensor",
                data.len()
            )));
        }
        Ok(Self {
            data,
            channels,
            len,
        })
    }

    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            data: vec![T::zero(); channels * len],
            channels,
            len,
        }
    }

    /// Single-channel tensor.
    pub fn from_vec(data: Vec<T>) -> Self {
        let len = data.len();
        Self {
            data,
            channels: 1,
            len,
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(vec![v])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.len)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn at(&self, c: usize, t: usize) -> T {
        self.data[c * self.len + t]
    }

    /// Same data viewed with a different shape.
    pub fn reshaped(mut self, channels: usize, len: usize) -> Result<Self> {
        if channels * len != self.data.len() {
            return Err(TcnError::shape(format!(
                "cannot reshape {}x{} into {channels}x{len}",
                self.channels, self.len
            )));
        }
        self.channels = channels;
        self.len = len;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor1<U> {
        Tensor1 {
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            channels: self.channels,
            len: self.len,
        }
    }
}

/// Weights and bias of one convolutional layer.
///
/// `weights` has shape `(a, b, kernel)` flattened row-major. Used by a
/// forward convolution it maps `b` input channels to `a` output channels
/// and `bias` has length `a`. Used by a transposed convolution it maps `a`
/// input channels back to `b` output channels and `bias` has length `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub shape: [usize; 3],
    pub stride: usize,
}

impl<T: Real> ConvLayerParams<T> {
    pub fn zeros(shape: [usize; 3], bias_len: usize, stride: usize) -> Self {
        Self {
            weights: vec![T::zero(); shape[0] * shape[1] * shape[2]],
            bias: vec![T::zero(); bias_len],
            shape,
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.shape[2]
    }

    pub fn weight_tensor(&self) -> Tensor1<T> {
        Tensor1 {
            data: self.weights.clone(),
            channels: self.shape[0],
            len: self.shape[1] * self.shape[2],
        }
    }

    pub fn bias_tensor(&self) -> Tensor1<T> {
        Tensor1::from_vec(self.bias.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, k] = self.shape;
        if k == 0 || a == 0 || b == 0 {
            return Err(TcnError::shape(format!(
                "degenerate weight shape {:?}",
                self.shape
            )));
        }
        if self.stride == 0 {
            return Err(TcnError::shape("stride must be at least 1"));
        }
        if self.weights.len() != a * b * k {
            return Err(TcnError::shape(format!(
                "{} weights do not match shape {:?}",
                self.weights.len(),
                self.shape
            )));
        }
        if !self.weights.iter().chain(&self.bias).all(|v| v.is_finite()) {
            return Err(TcnError::shape("non-finite layer parameter"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ConvLayerParams<U> {
        ConvLayerParams {
            weights: self
                .weights
                .iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            shape: self.shape,
            stride: self.stride,
        }
    }
}
