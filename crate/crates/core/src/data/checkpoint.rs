//! Checkpoint files: a one-line JSON header, one `\n` byte, then the
//! little-endian f32 payload of each tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload (after the separator).
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tensors: Vec<ManifestEntry>,
}

pub fn checkpoint_bytes(tensors: &[(String, &Tensor)]) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel() as u64 * 4;
            e
        })
        .collect();
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        tensors: entries,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in tensors {
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let named: Vec<(String, &Tensor)> = store.named_values().map(|(n, t)| (n.to_string(), t)).collect();
    fs::write(path, checkpoint_bytes(&named)?).map_err(|e| Error::io(path, e))
}

/// Parses a checkpoint into (name, tensor) pairs in manifest order.
pub fn parse_checkpoint(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor)>> {
    let fmt = |offset: usize, reason: String| Error::Format {
        path: path.to_string(),
        offset: offset as u64,
        reason,
    };
    let sep = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt(bytes.len(), "missing header separator".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..sep]).map_err(|e| fmt(e.column().saturating_sub(1), format!("bad header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(fmt(0, format!("unsupported format_version {}", header.format_version)));
    }
    let payload = &bytes[sep + 1..];
    let mut expected = 0u64;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(fmt(0, format!("tensor {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        expected += e.shape.iter().product::<usize>() as u64 * 4;
    }
    if payload.len() as u64 != expected {
        return Err(fmt(
            sep + 1 + payload.len().min(expected as usize),
            format!("payload has {} bytes, manifest expects {expected}", payload.len()),
        ));
    }
    header
        .tensors
        .into_iter()
        .map(|e| {
            let start = e.offset as usize;
            let n: usize = e.shape.iter().product();
            let data = payload[start..start + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok((e.name, Tensor::new(&e.shape, data)?))
        })
        .collect()
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, &path.display().to_string())
}

/// Loads a checkpoint into an already-built store. The manifest must name
/// exactly the store's tensors with matching shapes; it is checked in full
/// before any value is written.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let tensors = load_checkpoint(path)?;
    let mut problems = Vec::new();
    for (name, t) in &tensors {
        match store.id(name) {
            None => problems.push(format!("unexpected tensor {name}")),
            Some(id) if store.value(id).shape() != t.shape() => {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: store.value(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                })
            }
            Some(_) => {}
        }
    }
    for (name, _) in store.named_values() {
        if !tensors.iter().any(|(n, _)| n == name) {
            problems.push(format!("missing tensor {name}"));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Config(format!("checkpoint {} does not match the model: {}", path.display(), problems.join(", "))));
    }
    for (name, t) in tensors {
        let id = store.id(&name).expect("checked above");
        store.set(id, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_payload_reports_counts() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = checkpoint_bytes(&[("w".into(), &t)]).unwrap();
        let err = parse_checkpoint(&b[..b.len() - 4], "mem").unwrap_err().to_string();
        assert!(err.contains("12 bytes") && err.contains("expects 16"), "{err}");
    }
}
