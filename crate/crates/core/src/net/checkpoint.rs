//! Binary checkpoints.
//!
//! Layout: `b"IFSO"`, format version (`u32` LE), metadata length (`u64` LE),
//! UTF-8 JSON metadata, then every manifest tensor as little-endian `f64` in
//! manifest order. Gate values travel in the metadata.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GatedModel, LayerParams, LayerSpec};
use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IFSO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub gates: Vec<Option<Vec<f64>>>,
    pub tensors: Vec<ManifestEntry>,
}

pub fn to_bytes(model: &GatedModel) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (i, p) in model.params.iter().enumerate() {
        if let Some(p) = p {
            for (suffix, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                tensors.push(ManifestEntry { name: format!("layer{i}.{suffix}"), shape: t.shape().to_vec() });
                payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
            }
        }
    }
    let meta = Metadata {
        arch: model.arch.clone(),
        input_shape: model.input_shape.clone(),
        layers: model.layers.clone(),
        gates: model.gates.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<GatedModel> {
    if bytes.len() < 16 {
        return Err(bad(format!("length mismatch: header needs 16 bytes, file has {}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("version mismatch: file {version}, supported {VERSION}")));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let meta_end = 16usize
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("length mismatch: metadata extends past end of file"))?;
    let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])?;
    let expected: usize = meta.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
    let payload = &bytes[meta_end..];
    if payload.len() != expected {
        return Err(bad(format!("length mismatch: manifest needs {expected} payload bytes, found {}", payload.len())));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut entries = meta.tensors.iter();
    let mut next_tensor = |name: String| -> Result<Tensor<f64>> {
        let entry = entries.next().ok_or_else(|| bad(format!("manifest is missing {name}")))?;
        if entry.name != name {
            return Err(bad(format!("manifest order: expected {name}, found {}", entry.name)));
        }
        let len = entry.shape.iter().product();
        Tensor::new(entry.shape.clone(), values.by_ref().take(len).collect())
    };
    let mut params = Vec::with_capacity(meta.layers.len());
    for (i, layer) in meta.layers.iter().enumerate() {
        params.push(if layer.is_linear() {
            let weight = next_tensor(format!("layer{i}.weight"))?;
            let bias = next_tensor(format!("layer{i}.bias"))?;
            Some(LayerParams { weight, bias })
        } else {
            None
        });
    }
    let model = GatedModel {
        arch: meta.arch,
        input_shape: meta.input_shape,
        layers: meta.layers,
        params,
        gates: meta.gates,
    };
    model.validate().map_err(|e| bad(format!("inconsistent model: {e}")))?;
    Ok(model)
}

pub fn save(path: &Path, model: &GatedModel) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<GatedModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_model, ChannelId};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = build_model("res-tiny", 3).unwrap();
        m.set_gate(ChannelId { layer: 4, channel: 2 }, 0.0).unwrap();
        m.set_gate(ChannelId { layer: 9, channel: 1 }, 0.1 + 0.2).unwrap();
        let back = from_bytes(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ifso");
        save(&path, &m).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&build_model("mlp-tiny", 0).unwrap()).unwrap();
        let msg = |r: Result<GatedModel>| r.unwrap_err().to_string();
        assert!(msg(from_bytes(&bytes[..bytes.len() - 8])).contains("length mismatch"));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(msg(from_bytes(&wrong)).contains("magic"));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(msg(from_bytes(&wrong)).contains("version"));
        assert!(msg(from_bytes(&bytes[..10])).contains("length mismatch"));
    }
}
