//! Checkpoint file format.
//!
//! Layout: magic `ERAC`, u32 version, u32 JSON header length, the header,
//! then one record per tensor: u32 name length, UTF-8 name, u32 element
//! count, row-major float32 little-endian values. Buffers (BN running stats)
//! are stored alongside parameters with their buffer names.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ERAC";
const VERSION: u32 = 1;

/// JSON header describing the graph so it can be rebuilt on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Model-level configuration, opaque to this module.
    pub model: serde_json::Value,
    /// Echo of the training configuration that produced the file.
    pub train: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// A checkpoint read back from disk: header plus raw named tensors.
#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Write parameters and buffers to `path`.
pub fn save_checkpoint(
    path: &Path,
    model: serde_json::Value,
    train: serde_json::Value,
    params: &ParamStore,
    buffers: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut entries: Vec<ParamEntry> = params
        .iter()
        .map(|(name, p)| ParamEntry { name: name.to_string(), shape: p.value.shape().to_vec() })
        .collect();
    for (name, values) in buffers {
        entries.push(ParamEntry { name: name.clone(), shape: vec![values.len()] });
    }
    let header = CheckpointHeader { model, train, params: entries };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    for (name, p) in params.iter() {
        write_tensor(&mut f, name, p.value.values())?;
    }
    for (name, values) in buffers {
        write_tensor(&mut f, name, values)?;
    }
    f.flush()?;
    Ok(())
}

fn write_tensor(f: &mut impl Write, name: &str, values: &[f64]) -> Result<()> {
    f.write_all(&(name.len() as u32).to_le_bytes())?;
    f.write_all(name.as_bytes())?;
    f.write_all(&(values.len() as u32).to_le_bytes())?;
    for &v in values {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u32(&mut f)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let mut tensors = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let name_len = read_u32(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Format(format!("bad tensor name: {e}")))?;
        if name != entry.name {
            return Err(Error::Format(format!(
                "tensor order mismatch: header says {}, file has {name}",
                entry.name
            )));
        }
        let count = read_u32(&mut f)? as usize;
        let expected: usize = entry.shape.iter().product();
        if count != expected {
            return Err(Error::Format(format!(
                "tensor {name}: {count} values but shape {:?} wants {expected}",
                entry.shape
            )));
        }
        let mut buf = vec![0u8; count * 4];
        f.read_exact(&mut buf)?;
        let values: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push((name, Tensor::from_values(&entry.shape, values)?));
    }
    Ok(Checkpoint { header, tensors })
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.erac");
        let mut store = ParamStore::new();
        store
            .insert("a.w", Tensor::from_values(&[2, 2], vec![1.5, -2.25, 0.125, 3.0]).unwrap())
            .unwrap();
        store
            .insert("a.b", Tensor::from_values(&[2], vec![0.5, std::f64::consts::PI]).unwrap())
            .unwrap();
        let buffers = vec![("a.running_mean".to_string(), vec![0.25, 0.75])];
        save_checkpoint(
            &path,
            serde_json::json!({"kind": "test"}),
            serde_json::json!({}),
            &store,
            &buffers,
        )
        .unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.tensors.len(), 3);
        // exactly representable values survive the f32 round trip
        assert_eq!(ck.tensor("a.w").unwrap().values(), &[1.5, -2.25, 0.125, 3.0]);
        let pi_back = ck.tensor("a.b").unwrap().values()[1];
        assert!((pi_back - std::f64::consts::PI).abs() < 1e-6);
        assert_eq!(ck.tensor("a.running_mean").unwrap().values(), &[0.25, 0.75]);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.erac");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
