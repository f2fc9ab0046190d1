//! Quantized convolutional denoisers for FMCW/CS radar interference mitigation.
//!
//! The crate is organized bottom-up:
//!
//! * [`rd_signal`] synthesizes IF frames (objects, chirp-burst interference,
//!   noise), runs the range-Doppler chain and builds labeled datasets.
//! * [`tensor`] is a small reverse-mode differentiation engine with the layer
//!   set of the denoising CNN (same-padded 3x3 convolution, batch norm, ReLU,
//!   MSE) plus Adam.
//! * [`quant`] adds quantizers, straight-through estimators, learned
//!   bit-widths and packed weight storage.
//! * [`prob_weights`] trains distributions over ternary weights.
//! * [`baselines`] holds the classical mitigation references.
//! * [`eval`] does CA-CFAR detection, F1 scoring and memory/ops accounting.
//! * [`experiment`] wires everything into reproducible, file-backed commands.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod prob_weights;
pub mod quant;
pub mod rd_signal;
pub mod tensor;

pub use error::{Error, Result};
