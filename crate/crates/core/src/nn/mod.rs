//! The differentiable compute core: tensors, layer forward/backward passes,
//! HE initialization, Adam, the smoothed Dice loss, and finite-difference
//! verification helpers.
//!
//! Layout convention: tensors are `[batch, channels, z, y, x]` with x
//! fastest. 2D networks run through the very same code with a singleton z
//! axis (kernels `1×k×k`), so both paths share one tested implementation.
//! Convolutions use the cross-correlation convention (no kernel flip).

mod adam;
mod conv;
pub mod gradcheck;
mod init;
mod layers;
mod loss;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use conv::{conv_backward, conv_forward, tconv_backward, tconv_forward, ConvSpec, TconvSpec};
pub use init::he_init;
pub use layers::{
    batchnorm_backward, batchnorm_forward, dropout_backward, dropout_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, sigmoid_backward, sigmoid_forward,
    upsample_nearest_backward, upsample_nearest_forward, BnCache, BnStats,
};
pub use loss::dice_loss;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Execution mode for layers that behave differently in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// An N-dimensional value array, optionally paired with a gradient array of
/// the same shape. Gradients accumulate by summation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 5 {
            return Err(Error::Dims(format!("tensor rank {} not in 1..=5", dims.len())));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dims(format!("tensor dims {dims:?} must be positive")));
        }
        let n: usize = dims.iter().product();
        if values.len() != n {
            return Err(Error::Dims(format!(
                "tensor data length {} != product of dims {dims:?}",
                values.len()
            )));
        }
        Ok(Self { dims, values, grad: None })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Shape as `[batch, channels, z, y, x]`; the canonical network layout.
    pub fn shape5(&self) -> Result<[usize; 5]> {
        if self.dims.len() != 5 {
            return Err(Error::Dims(format!(
                "expected a 5D [b,c,z,y,x] tensor, got rank {}",
                self.dims.len()
            )));
        }
        Ok([self.dims[0], self.dims[1], self.dims[2], self.dims[3], self.dims[4]])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Accumulate into the gradient array, allocating it on first use.
    pub fn add_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::Dims(format!(
                "gradient length {} != value length {}",
                g.len(),
                self.values.len()
            )));
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.values.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
        Ok(())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

/// Description of one network layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        same_pad: bool,
    },
    Relu,
    Sigmoid,
    Dropout { rate: f64 },
    MaxPool { window: [usize; 3] },
    UpsampleNearest { factor: [usize; 3] },
    TransposedConv {
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
    },
    /// Concatenate the previous layer's output with the output of an earlier
    /// layer along the channel axis, previous channels first.
    Concat { source: usize },
    BatchNorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
}

impl LayerSpec {
    /// Number of trainable parameters this layer carries.
    ///
    /// Batch normalization here is affine-free (normalization only), so its
    /// running statistics are state, not trainable parameters.
    pub fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv { in_ch, out_ch, kernel, .. } => {
                out_ch * in_ch * kernel[0] * kernel[1] * kernel[2] + out_ch
            }
            LayerSpec::TransposedConv { in_ch, out_ch, kernel, .. } => {
                in_ch * out_ch * kernel[0] * kernel[1] * kernel[2] + out_ch
            }
            _ => 0,
        }
    }
}
