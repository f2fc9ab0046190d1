//! Weight and activation quantization: quantizers, straight-through
//! estimators, fixed and learned bit-widths, and packed weight storage.

mod pack;
mod qat;

pub use pack::{is_quantized, pack_weights, packed_len, read_quantized, unpack_weights, write_quantized};
pub use qat::{
    adaptive_bit_scale, avg_bitwidth_loss, calibrate_activation_ranges, train_qat, ActCode, BitLossConfig,
    LayerRange, LearnedBitwidthParams, QatConfig, QatHooks, QatOutcome, QuantState, QuantizedModel, WeightCode,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Which tensors are quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantTarget {
    Weights,
    Activations,
    Both,
}

impl QuantTarget {
    pub fn weights(self) -> bool {
        matches!(self, Self::Weights | Self::Both)
    }

    pub fn activations(self) -> bool {
        matches!(self, Self::Activations | Self::Both)
    }
}

impl FromStr for QuantTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w" | "weights" => Ok(Self::Weights),
            "a" | "activations" => Ok(Self::Activations),
            "wa" | "both" => Ok(Self::Both),
            _ => Err(Error::Config(format!("unknown quantization target {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    Binary,
    Integer,
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Self::Binary),
            "int" | "integer" => Ok(Self::Integer),
            _ => Err(Error::Config(format!("unknown quantization mode {s:?}"))),
        }
    }
}

/// Source of the dynamic range `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// `alpha = 1`.
    None,
    /// Maximum magnitude of the weights (recomputed every step) or a running
    /// maximum of the activations.
    Statistics,
    /// Trainable log-domain parameter.
    Learned,
}

impl FromStr for RangeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "stat" | "statistics" => Ok(Self::Statistics),
            "learned" => Ok(Self::Learned),
            _ => Err(Error::Config(format!("unknown range mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitWidth {
    Fixed(u32),
    /// Per-layer bit-width derived from trainable step and range.
    Learned,
}

impl FromStr for BitWidth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "learned" {
            return Ok(Self::Learned);
        }
        s.parse()
            .map(Self::Fixed)
            .map_err(|_| Error::Config(format!("bit-width must be an integer or \"learned\", got {s:?}")))
    }
}

impl fmt::Display for BitWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fixed(k) => write!(f, "{k}"),
            Self::Learned => f.write_str("learned"),
        }
    }
}

/// Quantization applied during training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub target: QuantTarget,
    pub mode: QuantMode,
    pub bits: BitWidth,
    pub range: RangeMode,
}

impl QuantSpec {
    /// Fixed `k`-bit integer quantization with statistics ranges.
    pub fn integer(target: QuantTarget, k: u32) -> Self {
        Self {
            target,
            mode: QuantMode::Integer,
            bits: BitWidth::Fixed(k),
            range: RangeMode::Statistics,
        }
    }

    pub fn binary(target: QuantTarget) -> Self {
        Self {
            target,
            mode: QuantMode::Binary,
            bits: BitWidth::Fixed(1),
            range: RangeMode::Statistics,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, self.bits) {
            (QuantMode::Binary, BitWidth::Fixed(1)) => Ok(()),
            (QuantMode::Binary, b) => Err(Error::Config(format!("binary quantization needs 1 bit, got {b}"))),
            (QuantMode::Integer, BitWidth::Fixed(k)) if (2..=32).contains(&k) => Ok(()),
            (QuantMode::Integer, BitWidth::Fixed(k)) => {
                Err(Error::Config(format!("integer quantization needs 2..=32 bits, got {k}")))
            }
            (QuantMode::Integer, BitWidth::Learned) if self.range == RangeMode::Learned => Ok(()),
            (QuantMode::Integer, BitWidth::Learned) => {
                Err(Error::Config("learned bit-widths need a learned range".into()))
            }
        }
    }

    /// Fixed bit-width, or `None` when learned.
    pub fn fixed_bits(&self) -> Option<u32> {
        match self.bits {
            BitWidth::Fixed(k) => Some(k),
            BitWidth::Learned => None,
        }
    }
}

/// Largest grid index `2^(k-1) - 1` of a `k`-bit symmetric integer grid.
pub fn grid_max_index(k: u32) -> f64 {
    (2f64).powi(k as i32 - 1) - 1.0
}

/// Symmetric grid `{0, ±step, ..., ±range}` with `range = (2^(k-1) - 1) step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteGrid {
    pub k: u32,
    pub step: f64,
    pub range: f64,
}

impl DiscreteGrid {
    pub fn new(k: u32, range: f64) -> Result<Self> {
        if !(2..=32).contains(&k) {
            return Err(Error::Config(format!("grid needs 2..=32 bits, got {k}")));
        }
        if !(range > 0.0 && range.is_finite()) {
            return Err(Error::Config(format!("grid range must be positive, got {range}")));
        }
        Ok(Self {
            k,
            step: range / grid_max_index(k),
            range,
        })
    }

    /// All `2^k - 1` grid points in increasing order.
    pub fn points(&self) -> Vec<f64> {
        let q = grid_max_index(self.k) as i64;
        (-q..=q).map(|i| i as f64 * self.step).collect()
    }
}

/// `+alpha` for `x >= 0`, else `-alpha`.
pub fn quantize_binary(x: f64, alpha: f64) -> f64 {
    if x >= 0.0 {
        alpha
    } else {
        -alpha
    }
}

/// `clip(round(x / step), -q, q) * step` with `q = 2^(k-1) - 1`, rounding
/// half away from zero.
pub fn quantize_integer(x: f64, grid: &DiscreteGrid) -> f64 {
    let q = grid_max_index(grid.k);
    (x / grid.step).round().clamp(-q, q) * grid.step
}

/// `max |w|`, or 1 when every weight is zero.
pub fn dynamic_range_statistics(w: &[f64]) -> f64 {
    let m = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SteKind {
    /// Surrogate `tanh`; gradient `1 - tanh^2(x)`.
    Sign,
    /// Clipped identity; gradient 1 inside the grid range and 0 outside.
    RoundClip,
}

/// Surrogate gradient of a quantizer at the saved forward inputs.
pub fn ste_backward(
    kind: SteKind,
    upstream: &[f64],
    saved_input: Option<&[f64]>,
    grid: Option<&DiscreteGrid>,
) -> Result<Vec<f64>> {
    let x = saved_input.ok_or_else(|| Error::Tape("straight-through estimator needs the forward input".into()))?;
    if x.len() != upstream.len() {
        return Err(Error::Shape(format!("{} inputs for {} gradients", x.len(), upstream.len())));
    }
    match kind {
        SteKind::Sign => Ok(x.iter().zip(upstream).map(|(v, g)| g * (1.0 - v.tanh().powi(2))).collect()),
        SteKind::RoundClip => {
            let grid = grid.ok_or_else(|| Error::Config("round-clip estimator needs a grid".into()))?;
            let q = grid_max_index(grid.k);
            Ok(x
                .iter()
                .zip(upstream)
                .map(|(v, g)| if (v / grid.step).abs() <= q { *g } else { 0.0 })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Nearest grid point by linear scan; ties go to the larger magnitude.
    fn nearest(x: f64, points: &[f64]) -> f64 {
        let mut best = points[0];
        for &p in points {
            let (dp, db) = ((x - p).abs(), (x - best).abs());
            if dp < db || (dp == db && p.abs() > best.abs()) {
                best = p;
            }
        }
        best
    }

    #[test]
    fn binary_examples() {
        assert_eq!(quantize_binary(0.3, 1.0), 1.0);
        assert_eq!(quantize_binary(0.0, 1.0), 1.0);
        assert_eq!(quantize_binary(-2.7, 0.5), -0.5);
    }

    #[test]
    fn integer_examples() {
        let g = DiscreteGrid::new(3, 0.7).unwrap();
        assert!((quantize_integer(0.5, &g) - 2.0 * 0.7 / 3.0).abs() < 1e-15);
        assert_eq!(quantize_integer(10.0, &g), 0.7);
        assert_eq!(quantize_integer(-10.0, &g), -0.7);
        assert_eq!(g.points().len(), 7);
        for p in g.points() {
            assert_eq!(quantize_integer(p, &g), p);
        }
        assert!(DiscreteGrid::new(1, 1.0).is_err());
        assert!(DiscreteGrid::new(4, 0.0).is_err());
    }

    #[test]
    fn range_statistics() {
        assert_eq!(dynamic_range_statistics(&[-3.0, 2.0]), 3.0);
        assert_eq!(dynamic_range_statistics(&[0.0, 0.0]), 1.0);
    }

    #[test]
    fn ste_examples() {
        let g = DiscreteGrid::new(3, 0.6).unwrap();
        assert_eq!(ste_backward(SteKind::Sign, &[1.0], Some(&[0.0]), None).unwrap(), vec![1.0]);
        let x = [0.1, -0.6, 0.61, -5.0];
        let got = ste_backward(SteKind::RoundClip, &[2.0; 4], Some(&x), Some(&g)).unwrap();
        assert_eq!(got, vec![2.0, 2.0, 0.0, 0.0]);
        assert!(ste_backward(SteKind::Sign, &[1.0], None, None).is_err());
    }

    #[test]
    fn spec_validation_and_parsing() {
        assert!(QuantSpec::integer(QuantTarget::Both, 8).validate().is_ok());
        assert!(QuantSpec::integer(QuantTarget::Both, 1).validate().is_err());
        assert!(QuantSpec::binary(QuantTarget::Weights).validate().is_ok());
        let mut s = QuantSpec::integer(QuantTarget::Weights, 4);
        s.bits = BitWidth::Learned;
        assert!(s.validate().is_err());
        s.range = RangeMode::Learned;
        assert!(s.validate().is_ok());
        assert_eq!("wa".parse::<QuantTarget>().unwrap(), QuantTarget::Both);
        assert_eq!("learned".parse::<BitWidth>().unwrap(), BitWidth::Learned);
        assert_eq!("6".parse::<BitWidth>().unwrap(), BitWidth::Fixed(6));
        assert!("x".parse::<BitWidth>().is_err());
        assert_eq!("stat".parse::<RangeMode>().unwrap(), RangeMode::Statistics);
        assert_eq!("int".parse::<QuantMode>().unwrap(), QuantMode::Integer);
    }

    proptest! {
        #[test]
        fn matches_nearest_grid_point(x in -3.0f64..3.0, k in 2u32..=8, range in 0.05f64..2.0) {
            let g = DiscreteGrid::new(k, range).unwrap();
            let q = quantize_integer(x, &g);
            prop_assert!((q - nearest(x, &g.points())).abs() <= 1e-12 * range);
        }

        #[test]
        fn idempotent_and_saturating(x in -1e3f64..1e3, k in 2u32..=8, range in 0.05f64..2.0) {
            let g = DiscreteGrid::new(k, range).unwrap();
            let q = quantize_integer(x, &g);
            prop_assert_eq!(quantize_integer(q, &g), q);
            prop_assert!(q.abs() <= range * (1.0 + 1e-12));
            let b = quantize_binary(x, range);
            prop_assert_eq!(quantize_binary(b, range), b);
        }

        #[test]
        fn scale_covariant(x in -3.0f64..3.0, k in 2u32..=8, c in 0.125f64..8.0) {
            // Powers of two keep the products exact.
            let c = c.log2().round().exp2();
            let g = DiscreteGrid::new(k, 0.75).unwrap();
            let gc = DiscreteGrid::new(k, 0.75 * c).unwrap();
            prop_assert_eq!(quantize_integer(c * x, &gc), c * quantize_integer(x, &g));
        }
    }
}
