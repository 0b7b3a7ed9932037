//! Self-describing checkpoint files.
//!
//! Layout: the magic bytes `LZDF`, a little-endian `u32` format version, a
//! little-endian `u32` header length, a JSON header with the model
//! configuration and the name and shape of every tensor, then each tensor's
//! values as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::Variant;
use crate::error::{Error, Result};
use crate::model::{LazyModel, ModelConfig};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"LZDF";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &LazyModel) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config,
        tensors: model
            .params
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + model.params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().expect("4 bytes")))
}

fn split_header(mut bytes: &[u8]) -> Result<(Header, &[u8])> {
    let b = &mut bytes;
    if take(b, 4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(b, "version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let len = read_u32(b, "header length")? as usize;
    let header = serde_json::from_slice(take(b, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    Ok((header, bytes))
}

/// Reads only the header.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    split_header(bytes).map(|(h, _)| h)
}

/// Parses a checkpoint and rebuilds the model, checking every tensor
/// against the shapes its configuration implies.
pub fn from_bytes(bytes: &[u8]) -> Result<LazyModel> {
    let (header, mut body) = split_header(bytes)?;
    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let raw = take(&mut body, count * 8, &entry.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&entry.shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        t.ensure_finite(&entry.name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        params.add(entry.name.clone(), t);
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
    }
    LazyModel::from_params(header.config, params)
}

/// Writes `model` to `path`.
pub fn save(model: &LazyModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

/// Loads a model. With `expect` set, a checkpoint for another variant is
/// rejected.
pub fn load(path: impl AsRef<Path>, expect: Option<Variant>) -> Result<LazyModel> {
    let bytes = std::fs::read(path)?;
    let model = from_bytes(&bytes)?;
    if let Some(v) = expect {
        if model.variant() != v {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {}, expected {v}",
                model.variant()
            )));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lzdf");
        save(&model, &path).unwrap();
        let back = load(&path, Some(Variant::ConcatHidden)).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        let again = dir.path().join("m2.lzdf");
        save(&back, &again).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
        assert!(matches!(load(&path, Some(Variant::WeightedSum)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn header_shapes_follow_config() {
        for v in Variant::ALL {
            let model = LazyModel::new(ModelConfig::toy(v), 1).unwrap();
            let header = read_header(&to_bytes(&model).unwrap()).unwrap();
            assert_eq!(header.config.variant(), v);
            let fresh = LazyModel::new(header.config, 2).unwrap();
            let expected: Vec<_> = fresh.params.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect();
            let got: Vec<_> = header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
            assert_eq!(got, expected, "{v}");
        }
    }

    fn patch_variant(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        let mut header = read_header(bytes).unwrap();
        let json = serde_json::to_string(&header.config).unwrap().replace(from, to);
        header.config = match serde_json::from_str(&json) {
            Ok(c) => c,
            Err(_) => return Vec::new(),
        };
        let (_, body) = split_header(bytes).unwrap();
        let h = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(body);
        out
    }

    #[test]
    fn rejects_mismatches() {
        let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 1).unwrap();
        let bytes = to_bytes(&model).unwrap();
        let swapped = patch_variant(&bytes, "concat_hidden", "weighted_sum");
        assert!(matches!(from_bytes(&swapped), Err(Error::Checkpoint(_))));
        let swapped = patch_variant(&bytes, "concat_hidden", "xattn_full");
        assert!(matches!(from_bytes(&swapped), Err(Error::Checkpoint(_))));

        let mut unknown = bytes.clone();
        let pos = unknown.windows(13).position(|w| w == b"concat_hidden").unwrap();
        unknown[pos..pos + 13].copy_from_slice(b"concat_hiddeN");
        assert!(matches!(from_bytes(&unknown), Err(Error::Checkpoint(_))));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(from_bytes(&version), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"PNG?...."), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(Error::Checkpoint(_))));
    }
}
