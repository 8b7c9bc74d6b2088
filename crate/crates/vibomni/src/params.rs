//! Flat, enumerable parameter storage and its binary container format.
//!
//! All learnable weights live in a single contiguous `f64` buffer with a
//! named manifest, so gradients align with parameters by index and
//! finite-difference probes can address any scalar. Checkpoints are a
//! versioned container: a JSON header (kind, config, manifest) followed by
//! the raw values as little-endian `f32` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"VBC1";
const VERSION: u32 = 1;

/// One named tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Handle to one entry, valid for the set that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named tensors backed by one flat buffer, in a fixed insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    data: Vec<f64>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Appends a named tensor; insertion order defines the global
    /// parameter enumeration.
    pub fn push(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, values.len(), "shape/value mismatch for {name}");
        let offset = self.data.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset,
        });
        self.data.extend_from_slice(&values);
        ParamId(self.entries.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let e = &self.entries[id.0];
        &self.data[e.offset..e.offset + e.numel()]
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn num_entries(&self) -> usize {
        self.entries.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Serializes the set with a typed config into the binary container.
    pub fn save<C: Serialize>(&self, path: &Path, kind: &str, config: &C) -> Result<()> {
        let header = ContainerHeader {
            version: VERSION,
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            manifest: self.entries.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        for v in &self.data {
            f.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    /// Loads a container, checking the expected kind.
    pub fn load<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(Self, C)> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidInput(format!(
                "{}: not a parameter container",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 4];
        f.read_exact(&mut len_bytes)?;
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: ContainerHeader = serde_json::from_slice(&header_bytes)?;
        if header.version != VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported container version {}",
                header.version
            )));
        }
        if header.kind != kind {
            return Err(Error::InvalidInput(format!(
                "container kind '{}' where '{kind}' was expected",
                header.kind
            )));
        }
        let total: usize = header.manifest.iter().map(|e| e.numel()).sum();
        let mut raw = Vec::new();
        f.read_to_end(&mut raw)?;
        if raw.len() != total * 4 {
            return Err(Error::InvalidInput(format!(
                "container payload {} bytes, manifest expects {}",
                raw.len(),
                total * 4
            )));
        }
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let config: C = serde_json::from_value(header.config)?;
        Ok((
            Self {
                entries: header.manifest,
                data,
            },
            config,
        ))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct ContainerHeader {
    version: u32,
    kind: String,
    config: serde_json::Value,
    manifest: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct DummyCfg {
        n: usize,
    }

    #[test]
    fn push_and_slice() {
        let mut p = ParamSet::new();
        let a = p.push("a", &[2, 3], vec![1.0; 6]);
        let b = p.push("b", &[4], vec![2.0; 4]);
        assert_eq!(p.len(), 10);
        assert_eq!(p.get(a), &[1.0; 6]);
        assert_eq!(p.get(b), &[2.0; 4]);
        assert_eq!(p.entry(b).offset, 6);
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let mut p = ParamSet::new();
        p.push("w", &[3], vec![0.5, -1.25, 3.0]);
        p.push("b", &[1], vec![0.0625]);
        p.save(&path, "model", &DummyCfg { n: 7 }).unwrap();
        let (q, cfg): (ParamSet, DummyCfg) = ParamSet::load(&path, "model").unwrap();
        assert_eq!(cfg, DummyCfg { n: 7 });
        assert_eq!(q.entries(), p.entries());
        // exactly representable in f32, so bit-equal after the round trip
        assert_eq!(q.values(), p.values());
        assert!(ParamSet::load::<DummyCfg>(&path, "estimator").is_err());
    }
}
