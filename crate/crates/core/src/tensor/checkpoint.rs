//! Checkpoint container: magic, little-endian `u32` header length, a JSON
//! header, then the array payloads in header order. Real arrays are stored as
//! little-endian `f32`; quantized arrays as opaque bit-packed blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Arch, Model, ModelSpec, Tensor};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"QRCK";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f64>),
    Packed { bits: u32, bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form metadata; models store their spec string under `"spec"`.
    pub meta: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    encoding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    byte_len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: serde_json::Value,
    arrays: Vec<HeaderEntry>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&ArrayEntry> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push(ArrayEntry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().to_vec()),
        });
    }

    /// Real-valued array `name`, or a format error naming `path`.
    pub fn tensor(&self, name: &str, path: &Path) -> Result<Tensor> {
        let entry = self
            .get(name)
            .ok_or_else(|| Error::format(path, format!("missing array {name}")))?;
        match &entry.data {
            ArrayData::F32(v) => Tensor::new(entry.shape.clone(), v.clone()),
            ArrayData::Packed { .. } => Err(Error::format(path, format!("array {name} is packed"))),
        }
    }
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for a in &ck.arrays {
        let start = blob.len();
        let (encoding, bits) = match &a.data {
            ArrayData::F32(v) => {
                for x in v {
                    blob.extend_from_slice(&(*x as f32).to_le_bytes());
                }
                ("f32", None)
            }
            ArrayData::Packed { bits, bytes } => {
                blob.extend_from_slice(bytes);
                ("packed", Some(*bits))
            }
        };
        entries.push(HeaderEntry {
            name: a.name.clone(),
            shape: a.shape.clone(),
            encoding: encoding.into(),
            bits,
            byte_len: blob.len() - start,
        });
    }
    let header = serde_json::to_vec(&Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        meta: ck.meta.clone(),
        arrays: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(Error::format(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_FORMAT_VERSION})",
                header.format_version
            ),
        ));
    }
    let mut blob = &body[hlen..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        if blob.len() < e.byte_len {
            return Err(Error::format(path, format!("array {} truncated", e.name)));
        }
        let (chunk, rest) = blob.split_at(e.byte_len);
        blob = rest;
        let count: usize = e.shape.iter().product();
        let data = match (e.encoding.as_str(), e.bits) {
            ("f32", None) => {
                if chunk.len() != 4 * count {
                    return Err(Error::format(path, format!("array {} has wrong length", e.name)));
                }
                ArrayData::F32(
                    chunk
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect(),
                )
            }
            ("packed", Some(bits)) => ArrayData::Packed {
                bits,
                bytes: chunk.to_vec(),
            },
            (enc, _) => return Err(Error::format(path, format!("unknown encoding {enc}"))),
        };
        arrays.push(ArrayEntry {
            name: e.name,
            shape: e.shape,
            data,
        });
    }
    if !blob.is_empty() {
        return Err(Error::format(path, "trailing bytes after last array"));
    }
    Ok(Checkpoint {
        meta: header.meta,
        arrays,
    })
}

impl Model {
    /// Real-valued checkpoint with the spec string in `meta["spec"]`.
    pub fn to_checkpoint(&self, mut meta: serde_json::Value) -> Checkpoint {
        if let Some(obj) = meta.as_object_mut() {
            obj.insert("spec".into(), self.spec.to_string().into());
            obj.insert("arch".into(), serde_json::to_value(self.spec.arch).expect("plain data"));
            obj.insert("channels".into(), serde_json::to_value(&self.spec.channels).expect("plain data"));
        }
        let mut ck = Checkpoint {
            meta,
            arrays: Vec::new(),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            ck.push_f32(format!("l{l}.weight"), &layer.weight);
            ck.push_f32(format!("l{l}.bias"), &layer.bias);
            if let Some(bn) = &layer.bn {
                let c = bn.running_mean.len();
                ck.push_f32(format!("l{l}.bn_gamma"), &bn.gamma);
                ck.push_f32(format!("l{l}.bn_beta"), &bn.beta);
                ck.push_f32(
                    format!("l{l}.bn_mean"),
                    &Tensor::new(vec![c], bn.running_mean.clone()).expect("length c"),
                );
                ck.push_f32(
                    format!("l{l}.bn_var"),
                    &Tensor::new(vec![c], bn.running_var.clone()).expect("length c"),
                );
            }
        }
        ck
    }

    /// Spec recorded in a checkpoint header.
    pub fn spec_from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<ModelSpec> {
        let channels: Vec<usize> = ck
            .meta
            .get("channels")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::format(path, "checkpoint lacks a channel list"))?;
        let arch: Arch = ck
            .meta
            .get("arch")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::format(path, "checkpoint lacks an architecture"))?;
        ModelSpec::from_channels(arch, channels)
    }

    /// Rebuilds a model. `weight_override` supplies layer weights decoded
    /// elsewhere (e.g. from packed integers).
    pub fn from_checkpoint(
        ck: &Checkpoint,
        path: &Path,
        weight_override: Option<&[Tensor]>,
    ) -> Result<Self> {
        let spec = Self::spec_from_checkpoint(ck, path)?;
        let mut model = Model::build(&spec, 0)?;
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let w = match weight_override {
                Some(ws) => ws
                    .get(l)
                    .cloned()
                    .ok_or_else(|| Error::format(path, format!("no weights for layer {l}")))?,
                None => ck.tensor(&format!("l{l}.weight"), path)?,
            };
            if w.shape() != layer.weight.shape() {
                return Err(Error::format(path, format!("layer {l} weight shape {:?}", w.shape())));
            }
            layer.weight = w;
            let b = ck.tensor(&format!("l{l}.bias"), path)?;
            if b.shape() != layer.bias.shape() {
                return Err(Error::format(path, format!("layer {l} bias shape {:?}", b.shape())));
            }
            layer.bias = b;
            if let Some(bn) = layer.bn.as_mut() {
                let c = bn.running_mean.len();
                let get = |k: &str| -> Result<Tensor> {
                    let t = ck.tensor(&format!("l{l}.{k}"), path)?;
                    if t.len() != c {
                        return Err(Error::format(path, format!("layer {l} {k} length {}", t.len())));
                    }
                    Ok(t)
                };
                bn.gamma = get("bn_gamma")?;
                bn.beta = get("bn_beta")?;
                bn.running_mean = get("bn_mean")?.into_data();
                bn.running_var = get("bn_var")?.into_data();
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_round(m: &Model) -> Model {
        let mut m = m.clone();
        for p in m.params_mut() {
            *p = p.map(|v| v as f32 as f64);
        }
        for l in &mut m.layers {
            if let Some(bn) = l.bn.as_mut() {
                bn.running_mean.iter_mut().for_each(|v| *v = *v as f32 as f64);
                bn.running_var.iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        m
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::build(&"L3-C8-B".parse().unwrap(), 4).unwrap();
        model.layers[0].bn.as_mut().unwrap().running_mean[2] = 0.123;
        write_checkpoint(&path, &model.to_checkpoint(serde_json::json!({"kind": "real"}))).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.meta["kind"], "real");
        assert_eq!(ck.meta["spec"], "L3-C8-B");
        let back = Model::from_checkpoint(&ck, &path, None).unwrap();
        assert_eq!(back, f32_round(&model));
        let size = std::fs::metadata(&path).unwrap().len() as usize;
        let params: usize = model.params().iter().map(|p| p.len()).sum::<usize>() + 2 * (8 + 4);
        assert!(size > 4 * params);
    }

    #[test]
    fn packed_arrays_survive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let ck = Checkpoint {
            meta: serde_json::json!({}),
            arrays: vec![ArrayEntry {
                name: "w".into(),
                shape: vec![3],
                data: ArrayData::Packed {
                    bits: 3,
                    bytes: vec![0b1010_1010, 0x01],
                },
            }],
        };
        write_checkpoint(&path, &ck).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
        let model = Model::build(&"L2-C4-A".parse().unwrap(), 1).unwrap();
        write_checkpoint(&path, &model.to_checkpoint(serde_json::json!({}))).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
        bytes.push(0);
        let key = b"\"format_version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'9';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint(&path).is_err());
        assert!(matches!(read_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
