//! Named-tensor parameter archive.
//!
//! Layout: the 8-byte magic `STRKARC1`, a little-endian `u64` header length,
//! a JSON header `{"meta": .., "tensors": [{"name", "shape", "dtype"}]}`,
//! then every tensor's `f64` values little-endian in manifest order. Values
//! are stored bit-exactly, so load → save reproduces the same bytes.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use stroke_autograd::{ParamSet, Tensor};

use super::{replace_head, Arch, BackboneConfig, BackboneModel, HeadInit};
use crate::error::{Error, Result, SchemaDiff};

const MAGIC: &[u8; 8] = b"STRKARC1";
const DTYPE: &str = "f64";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

pub fn encode_archive(meta: &serde_json::Value, params: &ParamSet) -> Result<Vec<u8>> {
    let header = Header {
        meta: meta.clone(),
        tensors: params
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_archive(path: &Path, bytes: &[u8]) -> Result<Archive> {
    let bad = |message: String| Error::Archive {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing archive magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut off = 16 + hlen;
    let mut params = ParamSet::new();
    for e in header.tensors {
        if e.dtype != DTYPE {
            return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let chunk = bytes
            .get(off..off + 8 * n)
            .ok_or_else(|| bad(format!("truncated data for tensor `{}`", e.name)))?;
        off += 8 * n;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.insert(e.name.clone(), Tensor::from_parts(e.shape, data)).is_some() {
            return Err(bad(format!("duplicate tensor `{}`", e.name)));
        }
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(Archive {
        meta: header.meta,
        params,
    })
}

pub fn write_archive(path: &Path, meta: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let bytes = encode_archive(meta, params)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(path, &bytes)
}

/// Names and shapes in `found` that disagree with `expected`.
pub fn schema_diff(expected: &ParamSet, found: &ParamSet) -> SchemaDiff {
    let mut diff = SchemaDiff::default();
    for (name, t) in expected.iter() {
        match found.get(name) {
            None => diff.missing.push(name.to_string()),
            Some(f) if f.shape() != t.shape() => {
                diff.shape_mismatch
                    .push((name.to_string(), t.shape().to_vec(), f.shape().to_vec()))
            }
            Some(_) => {}
        }
    }
    diff.unexpected = found
        .names()
        .filter(|n| !expected.contains(n))
        .map(str::to_string)
        .collect();
    diff
}

pub(super) fn model_from_archive(
    path: &Path,
    archive: Archive,
    expect_arch: Option<Arch>,
) -> Result<BackboneModel> {
    let bad = |message: String| Error::Archive {
        path: path.to_path_buf(),
        message,
    };
    let config: BackboneConfig = serde_json::from_value(
        archive
            .meta
            .get("config")
            .cloned()
            .ok_or_else(|| bad("metadata has no backbone config".into()))?,
    )?;
    if let Some(arch) = expect_arch {
        if config.arch != arch {
            return Err(bad(format!("archive holds a {} backbone, expected {arch}", config.arch)));
        }
    }
    let num_classes = archive
        .meta
        .get("num_classes")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("metadata has no num_classes".into()))? as usize;
    let extra = archive
        .meta
        .get("extra")
        .cloned()
        .unwrap_or(serde_json::Value::Null);

    let mut reference = BackboneModel::new(config.clone(), 0)?;
    replace_head(&mut reference, num_classes, HeadInit::Zeros, 0);
    let diff = schema_diff(reference.params(), &archive.params);
    if !diff.is_empty() {
        return Err(Error::Schema(diff));
    }
    let model = BackboneModel::from_parts(config, archive.params, num_classes, extra);
    Ok(model)
}

/// Loads externally produced weights for `arch`, checking them against the
/// architecture's parameter schema. `registry_map` renames layer-registry
/// entries (internal name → source-model name) so probes can use the
/// source model's layer names.
pub fn load_external_backbone(
    arch: Arch,
    weights_path: &Path,
    registry_map: &IndexMap<String, String>,
) -> Result<BackboneModel> {
    let archive = read_archive(weights_path)?;
    let mut model = model_from_archive(weights_path, archive, Some(arch))?;
    model.set_aliases(registry_map)?;
    Ok(model)
}
