use serde::{Deserialize, Serialize};

use crate::tensor::ModelSpec;
use crate::{Error, Result};

/// Bytes per kB in all reports.
pub const KIB: f64 = 1024.0;

/// Storage precision of every layer's weights and hidden activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitAssignment {
    /// Bits per convolution weight, one entry per layer.
    pub weight_bits: Vec<u32>,
    /// Bits per hidden activation, one entry per hidden layer.
    pub act_bits: Vec<u32>,
    /// Whether weight layers carry a per-layer `f32` range value.
    pub quantized_weights: bool,
}

impl BitAssignment {
    /// The same precision everywhere; 32 bits means real-valued.
    pub fn uniform(spec: &ModelSpec, weight_bits: u32, act_bits: u32) -> Self {
        Self {
            weight_bits: vec![weight_bits; spec.layers()],
            act_bits: vec![act_bits; spec.layers() - 1],
            quantized_weights: weight_bits < 32,
        }
    }

    /// Bits of activation tensor `i`, where 0 is the network input and
    /// `layers` is the output. Input and output take the precision of the
    /// adjacent hidden layer.
    pub fn activation_bits(&self, i: usize) -> u32 {
        let hidden = self.act_bits.len();
        if hidden == 0 {
            return 32;
        }
        self.act_bits[i.clamp(1, hidden) - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub weights: usize,
    pub weight_bits: u32,
    pub weight_bytes: f64,
    /// Values of this layer's output activation tensor.
    pub activations: usize,
    pub activation_bits: u32,
}

/// Inference memory: stored weights plus the largest pair of consecutive
/// activation tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub params: usize,
    pub weight_bytes: f64,
    /// One `f32` range value per quantized layer; not part of the total.
    pub range_sidecar_bytes: f64,
    pub activation_bytes: f64,
    /// Index `l` of the pair (activation `l`, activation `l + 1`), with the
    /// network input counted as activation 0.
    pub activation_pair: usize,
    pub total_bytes: f64,
    pub layers: Vec<LayerMemory>,
}

impl MemoryReport {
    pub fn weight_kb(&self) -> f64 {
        self.weight_bytes / KIB
    }

    pub fn activation_kb(&self) -> f64 {
        self.activation_bytes / KIB
    }

    pub fn total_kb(&self) -> f64 {
        self.total_bytes / KIB
    }
}

pub fn memory_report(spec: &ModelSpec, bits: &BitAssignment, rd_cells: usize) -> Result<MemoryReport> {
    spec.validate()?;
    let n = spec.layers();
    if bits.weight_bits.len() != n || bits.act_bits.len() != n - 1 {
        return Err(Error::Config(format!(
            "bit assignment for {} weight / {} activation layers, model has {n} layers",
            bits.weight_bits.len(),
            bits.act_bits.len()
        )));
    }
    if bits.weight_bits.iter().chain(&bits.act_bits).any(|&b| b == 0 || b > 32) {
        return Err(Error::Config("bit-widths must be in 1..=32".into()));
    }
    let values: Vec<usize> = (0..=n)
        .map(|i| if i == 0 { 2 } else { spec.channels[i - 1] } * rd_cells)
        .collect();
    let act_bytes: Vec<f64> = (0..=n)
        .map(|i| values[i] as f64 * bits.activation_bits(i) as f64 / 8.0)
        .collect();
    let (activation_pair, activation_bytes) = (0..n)
        .map(|i| (i, act_bytes[i] + act_bytes[i + 1]))
        .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
    let layers: Vec<LayerMemory> = (0..n)
        .map(|l| {
            let w = spec.layer_weight_count(l);
            LayerMemory {
                weights: w,
                weight_bits: bits.weight_bits[l],
                weight_bytes: w as f64 * bits.weight_bits[l] as f64 / 8.0,
                activations: values[l + 1],
                activation_bits: bits.activation_bits(l + 1),
            }
        })
        .collect();
    let weight_bytes = layers.iter().map(|l| l.weight_bytes).sum::<f64>();
    Ok(MemoryReport {
        params: spec.weight_count(),
        weight_bytes,
        range_sidecar_bytes: if bits.quantized_weights { 4.0 * n as f64 } else { 0.0 },
        activation_bytes,
        activation_pair,
        total_bytes: weight_bytes + activation_bytes,
        layers,
    })
}

/// Inference operation count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpsReport {
    pub macs: u64,
    /// Batch norm (2) plus ReLU (1) per hidden activation.
    pub activation_ops: u64,
    pub mops: f64,
}

/// Works for any channel list ending in 2, including a single 2 -> 2 layer.
pub fn ops_report(spec: &ModelSpec, rd_cells: usize) -> Result<OpsReport> {
    if spec.channels.last() != Some(&2) || spec.channels.contains(&0) {
        return Err(Error::Config(format!("invalid channel list {:?}", spec.channels)));
    }
    let hw = rd_cells as u64;
    let macs = (0..spec.layers())
        .map(|l| spec.layer_weight_count(l) as u64 * hw)
        .sum::<u64>();
    let hidden = &spec.channels[..spec.layers() - 1];
    let activation_ops = 3 * hidden.iter().map(|&c| c as u64).sum::<u64>() * hw;
    Ok(OpsReport {
        macs,
        activation_ops,
        mops: (macs + activation_ops) as f64 / 1e6,
    })
}
