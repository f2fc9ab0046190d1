//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter it
//! as leaves, and [`Tape::backward`] fills the gradient of each recorded node.
//! The layer set covers what the denoising CNN needs, plus the
//! quantizer and distribution primitives used by [`crate::quant`] and
//! [`crate::prob_weights`].

mod adam;
mod checkpoint;
mod conv;
mod model;
mod tape;
mod train;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{
    read_checkpoint, write_checkpoint, ArrayData, ArrayEntry, Checkpoint, CHECKPOINT_FORMAT_VERSION,
};
pub use conv::{conv2d_backward, conv2d_forward};
pub use model::{
    forward_model, from_channels, normalize_map, normalize_pair, to_channels, Arch, BatchNorm, BnMode, BN_EPS,
    BN_MOMENTUM,
    ForwardOut, LayerHooks, LayerParams, Model, ModelSpec, ParamVars, PlainHooks, NORM_MEDIAN_MULTIPLE,
};
pub use tape::{QuantStep, Tape, Var};
pub use train::{
    batch_tensors, epoch_order, predict_samples, run_epochs, train_real, BestSnapshot, EpochLog,
    Patches, TrainConfig,
};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Unpacks a 4-D shape as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Shape(format!("expected 4-D tensor, got {:?}", self.shape))),
        }
    }
}
