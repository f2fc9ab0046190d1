use std::path::Path;

use serde::{Deserialize, Serialize};

use super::qat::{ActCode, QuantizedModel, WeightCode};
use super::{grid_max_index, QuantSpec};
use crate::tensor::{read_checkpoint, write_checkpoint, ArrayData, Checkpoint, Model, Tensor};
use crate::{Error, Result};

/// Bytes of `n` values at `k` bits each.
pub fn packed_len(n: usize, k: u32) -> usize {
    (n * k as usize).div_ceil(8)
}

/// Packs grid values as `k`-bit two's complement indices, least significant
/// bit first. For `k = 1` the bit is set for `+step` and clear for `-step`.
pub fn pack_weights(w: &[f64], k: u32, step: f64) -> Result<Vec<u8>> {
    if !(1..=32).contains(&k) {
        return Err(Error::Config(format!("cannot pack {k}-bit values")));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Config(format!("grid step must be positive, got {step}")));
    }
    let mut out = vec![0u8; packed_len(w.len(), k)];
    let mask = if k == 32 { u32::MAX } else { (1u32 << k) - 1 };
    for (i, &v) in w.iter().enumerate() {
        let code: u32 = if k == 1 {
            if v == step {
                1
            } else if v == -step {
                0
            } else {
                return Err(Error::Config(format!("weight {v} is not +-{step}")));
            }
        } else {
            let q = grid_max_index(k);
            let idx = (v / step).round();
            if idx.abs() > q || idx * step != v {
                return Err(Error::Config(format!("weight {v} is off the {k}-bit grid with step {step}")));
            }
            (idx as i64 as u32) & mask
        };
        let bit0 = i * k as usize;
        for b in 0..k as usize {
            if code >> b & 1 == 1 {
                let pos = bit0 + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pack_weights`] for `n` values.
pub fn unpack_weights(bytes: &[u8], n: usize, k: u32, step: f64) -> Result<Vec<f64>> {
    if !(1..=32).contains(&k) {
        return Err(Error::Config(format!("cannot unpack {k}-bit values")));
    }
    if bytes.len() != packed_len(n, k) {
        return Err(Error::Shape(format!(
            "{} bytes for {n} values at {k} bits",
            bytes.len()
        )));
    }
    Ok((0..n)
        .map(|i| {
            let bit0 = i * k as usize;
            let mut code: u64 = 0;
            for b in 0..k as usize {
                let pos = bit0 + b;
                code |= u64::from(bytes[pos / 8] >> (pos % 8) & 1) << b;
            }
            if k == 1 {
                return if code == 1 { step } else { -step };
            }
            let signed = if code >> (k - 1) & 1 == 1 {
                code as i64 - (1i64 << k)
            } else {
                code as i64
            };
            signed as f64 * step
        })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct QuantMeta {
    quant: QuantSpec,
    weights: Vec<WeightCode>,
    acts: Vec<ActCode>,
}

/// Writes a quantized model: packed weights plus per-layer codes in the
/// header. `meta` must be a JSON object.
pub fn write_quantized(path: &Path, qm: &QuantizedModel, meta: serde_json::Value) -> Result<()> {
    let mut ck = qm.model.to_checkpoint(meta);
    let info = serde_json::to_value(QuantMeta {
        quant: qm.quant,
        weights: qm.weights.clone(),
        acts: qm.acts.clone(),
    })?;
    if let Some(obj) = ck.meta.as_object_mut() {
        obj.insert("quantized".into(), info);
    }
    for (l, code) in qm.weights.iter().enumerate() {
        let (k, step) = match *code {
            WeightCode::Real => continue,
            WeightCode::Binary { alpha } => (1, alpha),
            WeightCode::Integer { k, step } => (k, step),
        };
        let name = format!("l{l}.weight");
        let entry = ck
            .arrays
            .iter_mut()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Shape(format!("model has no array {name}")))?;
        let bytes = pack_weights(qm.model.layers[l].weight.data(), k, step)?;
        entry.data = ArrayData::Packed { bits: k, bytes };
    }
    write_checkpoint(path, &ck)
}

/// Whether a checkpoint holds a quantized model.
pub fn is_quantized(ck: &Checkpoint) -> bool {
    ck.meta.get("quantized").is_some()
}

/// Reads a checkpoint written by [`write_quantized`].
pub fn read_quantized(path: &Path) -> Result<QuantizedModel> {
    let ck = read_checkpoint(path)?;
    let info: QuantMeta = ck
        .meta
        .get("quantized")
        .cloned()
        .ok_or_else(|| Error::format(path, "not a quantized checkpoint"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string())))?;
    let spec = Model::spec_from_checkpoint(&ck, path)?;
    if info.weights.len() != spec.layers() || info.acts.len() + 1 != spec.layers() {
        return Err(Error::format(path, "quantization codes do not match the layer count"));
    }
    let weights = info
        .weights
        .iter()
        .enumerate()
        .map(|(l, code)| {
            let name = format!("l{l}.weight");
            let entry = ck
                .get(&name)
                .ok_or_else(|| Error::format(path, format!("missing array {name}")))?;
            let n: usize = entry.shape.iter().product();
            let (k, step) = match (*code, &entry.data) {
                (WeightCode::Real, ArrayData::F32(_)) => return ck.tensor(&name, path),
                (WeightCode::Binary { alpha }, _) => (1, alpha),
                (WeightCode::Integer { k, step }, _) => (k, step),
                _ => return Err(Error::format(path, format!("array {name} should be real"))),
            };
            match &entry.data {
                ArrayData::Packed { bits, bytes } if *bits == k => {
                    Tensor::new(entry.shape.clone(), unpack_weights(bytes, n, k, step)?)
                }
                _ => Err(Error::format(path, format!("array {name} is not packed at {k} bits"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        model: Model::from_checkpoint(&ck, path, Some(&weights))?,
        quant: info.quant,
        weights: info.weights,
        acts: info.acts,
    })
}
