use std::path::Path;

use super::{DistModel, TernaryDist};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Model};
use crate::{Error, Result};

/// Whether a checkpoint holds ternary weight distributions.
pub fn is_distribution(ck: &Checkpoint) -> bool {
    ck.meta.get("ternary_alpha").is_some()
}

/// Writes the shared parameters plus one `[n, 3]` logits array and one range
/// value per layer. `meta` must be a JSON object.
pub fn write_distribution(path: &Path, dm: &DistModel, meta: serde_json::Value) -> Result<()> {
    let mut ck = dm.base.to_checkpoint(meta);
    let alphas: Vec<f64> = dm.layers.iter().map(|d| d.alpha).collect();
    if let Some(obj) = ck.meta.as_object_mut() {
        obj.insert("ternary_alpha".into(), serde_json::to_value(alphas)?);
    }
    for (l, d) in dm.layers.iter().enumerate() {
        ck.push_f32(format!("l{l}.logits"), &d.logits);
    }
    write_checkpoint(path, &ck)
}

/// Reads a checkpoint written by [`write_distribution`].
pub fn read_distribution(path: &Path) -> Result<DistModel> {
    let ck = read_checkpoint(path)?;
    let alphas: Vec<f64> = ck
        .meta
        .get("ternary_alpha")
        .cloned()
        .ok_or_else(|| Error::format(path, "not a distribution checkpoint"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format(path, e.to_string())))?;
    let base = Model::from_checkpoint(&ck, path, None)?;
    if alphas.len() != base.layers.len() {
        return Err(Error::format(path, "one range value per layer expected"));
    }
    let layers = base
        .layers
        .iter()
        .zip(alphas)
        .enumerate()
        .map(|(l, (layer, alpha))| {
            let logits = ck.tensor(&format!("l{l}.logits"), path)?;
            if logits.shape() != [layer.weight.len(), 3] {
                return Err(Error::format(path, format!("layer {l} logits shape {:?}", logits.shape())));
            }
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::format(path, format!("layer {l} range {alpha}")));
            }
            Ok(TernaryDist {
                logits,
                alpha,
                shape: layer.weight.shape().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DistModel { base, layers })
}
