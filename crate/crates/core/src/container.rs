//! On-disk container shared by datasets and checkpoints: a JSON manifest plus
//! one header-less little-endian `f32` blob file. Shapes and byte offsets
//! live only in the manifest's blob table.
//!
//! Values are stored as `f32`; a round trip is bit-exact for tensors whose
//! entries are already `f32`-representable.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob file.
    pub offset: u64,
    /// Length in bytes.
    pub length: u64,
}

/// Writes `header` (a JSON object) augmented with `version`, `blob_file` and
/// `blobs`, then the blob file next to it.
pub fn write(dir: &Path, manifest_name: &str, blob_name: &str, header: Map<String, Value>, blobs: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut table = Vec::with_capacity(blobs.len());
    let mut bytes = Vec::with_capacity(blobs.scalar_count() * 4);
    for (name, t) in blobs.iter() {
        let offset = bytes.len() as u64;
        bytes.extend(t.data().iter().flat_map(|v| (*v as f32).to_le_bytes()));
        table.push(BlobEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            length: bytes.len() as u64 - offset,
        });
    }
    let mut doc = header;
    doc.insert("version".into(), Value::from(CONTAINER_VERSION));
    doc.insert("blob_file".into(), Value::from(blob_name));
    doc.insert("blobs".into(), serde_json::to_value(&table)?);
    let blob_path = dir.join(blob_name);
    std::fs::write(&blob_path, &bytes).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(manifest_name);
    let text = serde_json::to_string_pretty(&Value::Object(doc))?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

/// Reads a container, returning the manifest (with the container fields
/// removed) and the blobs in table order.
pub fn read(dir: &Path, manifest_name: &str) -> Result<(Map<String, Value>, ParamStore)> {
    let manifest_path = dir.join(manifest_name);
    if !manifest_path.is_file() {
        return Err(Error::Missing(manifest_path));
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut doc = match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(Error::Manifest("top level is not an object".into())),
        Err(e) => return Err(Error::Manifest(e.to_string())),
    };
    let version = doc
        .remove("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Manifest("missing integer version".into()))?;
    if version != u64::from(CONTAINER_VERSION) {
        return Err(Error::Version {
            expected: CONTAINER_VERSION,
            found: u32::try_from(version).unwrap_or(u32::MAX),
        });
    }
    let blob_name = match doc.remove("blob_file") {
        Some(Value::String(s)) if !s.contains(['/', '\\']) && !s.is_empty() => s,
        _ => return Err(Error::Manifest("missing or invalid blob_file".into())),
    };
    let table: Vec<BlobEntry> = serde_json::from_value(doc.remove("blobs").unwrap_or(Value::Null))
        .map_err(|e| Error::BlobTable(e.to_string()))?;
    validate_table(&table)?;

    let blob_path = dir.join(&blob_name);
    if !blob_path.is_file() {
        return Err(Error::Missing(blob_path));
    }
    let bytes = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut store = ParamStore::new();
    for entry in &table {
        let end = entry.offset + entry.length;
        if end > bytes.len() as u64 {
            return Err(Error::Truncated {
                name: entry.name.clone(),
                need: end,
                have: bytes.len() as u64,
            });
        }
        let data = bytes[entry.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((doc, store))
}

fn validate_table(table: &[BlobEntry]) -> Result<()> {
    let mut names = std::collections::HashSet::new();
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(table.len());
    for e in table {
        if !names.insert(e.name.as_str()) {
            return Err(Error::BlobTable(format!("duplicate blob name {:?}", e.name)));
        }
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(Error::BlobShape {
                name: e.name.clone(),
                detail: format!("invalid shape {:?}", e.shape),
            });
        }
        let want = e.shape.iter().product::<usize>() as u64 * 4;
        if e.length != want {
            return Err(Error::BlobShape {
                name: e.name.clone(),
                detail: format!("shape {:?} needs {want} bytes, table says {}", e.shape, e.length),
            });
        }
        if e.offset % 4 != 0 {
            return Err(Error::BlobShape {
                name: e.name.clone(),
                detail: format!("offset {} is not 4-byte aligned", e.offset),
            });
        }
        spans.push((e.offset, e.offset + e.length, &e.name));
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::BlobTable(format!("blobs {:?} and {:?} overlap", w[0].2, w[1].2)));
        }
    }
    Ok(())
}

/// SHA-256 over the manifest bytes followed by the blob file bytes.
pub fn hash(dir: &Path, manifest_name: &str) -> Result<String> {
    let manifest_path = dir.join(manifest_name);
    if !manifest_path.is_file() {
        return Err(Error::Missing(manifest_path));
    }
    let text = std::fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let blob_name = serde_json::from_slice::<Value>(&text)?
        .get("blob_file")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| Error::Manifest("missing blob_file".into()))?;
    let blob_path = dir.join(blob_name);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut h = Sha256::new();
    h.update(&text);
    h.update(&blob);
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::matrix(2, 3, vec![0.5, -1.25, 3.0, 1e-3_f32 as f64, 0.0, 7.0]));
        p.insert("b", Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        p
    }

    fn header() -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("kind".into(), Value::from("test"));
        m
    }

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "m.json", "d.f32", header(), &sample()).unwrap();
        let (h, p) = read(dir.path(), "m.json").unwrap();
        assert_eq!(h, header());
        assert!(p.bit_eq(&sample()));
        assert_eq!(hash(dir.path(), "m.json").unwrap().len(), 64);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read(dir.path(), "m.json"), Err(Error::Missing(_))));
        write(dir.path(), "m.json", "d.f32", header(), &sample()).unwrap();
        let blob = dir.path().join("d.f32");
        let full = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &full[..full.len() - 4]).unwrap();
        match read(dir.path(), "m.json") {
            Err(Error::Truncated { name, .. }) => assert_eq!(name, "b"),
            other => panic!("{other:?}"),
        }
        std::fs::write(&blob, &full).unwrap();

        let path = dir.path().join("m.json");
        let original = std::fs::read_to_string(&path).unwrap();
        let edit = |f: &dyn Fn(&mut Value)| {
            let mut v: Value = serde_json::from_str(&original).unwrap();
            f(&mut v);
            std::fs::write(&path, v.to_string()).unwrap();
            read(dir.path(), "m.json")
        };
        assert!(matches!(edit(&|v| v["version"] = 9.into()), Err(Error::Version { found: 9, .. })));
        assert!(matches!(edit(&|v| v["blobs"][1]["offset"] = 8.into()), Err(Error::BlobTable(_))));
        assert!(matches!(edit(&|v| v["blobs"][0]["shape"] = serde_json::json!([3, 3])), Err(Error::BlobShape { .. })));
        assert!(matches!(edit(&|v| v["blobs"] = 3.into()), Err(Error::BlobTable(_))));
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(read(dir.path(), "m.json"), Err(Error::Manifest(_))));
    }
}
