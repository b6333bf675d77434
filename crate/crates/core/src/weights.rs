//! Named-weight checkpoints.
//!
//! Layout, little-endian throughout, no padding:
//!
//! ```text
//! "IRWT"  version:u32
//! meta_count:u32   { key_len:u16 key  value_len:u32 value }*
//! entry_count:u32  { name_len:u16 name  dtype:u8 ndim:u8 dims:u32*ndim  data }*
//! ```
//!
//! `dtype` 0 is 32-bit IEEE-754. Parameter tensors appear in the model's
//! enumeration order; a normalized layer's `moving_mean` and `moving_var`
//! follow its `beta`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ModelConfig, ModelGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IRWT";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Metadata key holding the JSON-encoded [`ModelConfig`].
pub const META_MODEL_CONFIG: &str = "model_config";
pub const META_CONFIG_DIGEST: &str = "config_digest";
pub const META_SOURCE_TASK: &str = "source_task";
pub const META_EPOCH: &str = "epoch";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub metadata: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

/// Hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_digest(cfg: &ModelConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Digest of a tensor's exact bit pattern.
pub fn tensor_digest(t: &Tensor) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    sha256_hex(&bytes)
}

impl Checkpoint {
    /// Snapshot of `model`. The model config and its digest are always
    /// recorded; `extra` metadata follows them.
    pub fn from_model(model: &ModelGraph, extra: &[(&str, String)]) -> Self {
        let bn_index: HashMap<&str, usize> = model
            .bn_names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let mut entries = Vec::new();
        for p in model.params() {
            entries.push(Entry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            });
            if let Some(unit) = p.name.strip_suffix("/beta") {
                if let Some(&i) = bn_index.get(unit) {
                    let st = &model.bn_states()[i];
                    for (suffix, t) in [("moving_mean", &st.mean), ("moving_var", &st.var)] {
                        entries.push(Entry {
                            name: format!("{unit}/{suffix}"),
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        });
                    }
                }
            }
        }
        let mut metadata = vec![
            (
                META_MODEL_CONFIG.to_string(),
                serde_json::to_string(model.config()).expect("config serializes"),
            ),
            (META_CONFIG_DIGEST.to_string(), config_digest(model.config())),
        ];
        metadata.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        Self {
            version: FORMAT_VERSION,
            metadata,
            entries,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let json = self
            .meta(META_MODEL_CONFIG)
            .ok_or_else(|| Error::Format(format!("metadata key `{META_MODEL_CONFIG}` missing")))?;
        serde_json::from_str(json).map_err(|e| Error::Format(format!("bad `{META_MODEL_CONFIG}`: {e}")))
    }

    /// Total scalar count over all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.scalar_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        put_u32(&mut out, self.metadata.len(), "metadata count")?;
        for (k, v) in &self.metadata {
            put_u16(&mut out, k.len(), "metadata key")?;
            out.extend_from_slice(k.as_bytes());
            put_u32(&mut out, v.len(), "metadata value")?;
            out.extend_from_slice(v.as_bytes());
        }
        put_u32(&mut out, self.entries.len(), "entry count")?;
        for e in &self.entries {
            if e.shape.iter().product::<usize>() != e.data.len() {
                return Err(Error::Format(format!(
                    "entry `{}` has {} values for shape {:?}",
                    e.name,
                    e.data.len(),
                    e.shape
                )));
            }
            put_u16(&mut out, e.name.len(), "entry name")?;
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            let ndim =
                u8::try_from(e.shape.len()).map_err(|_| Error::Format(format!("`{}` has too many dims", e.name)))?;
            out.push(ndim);
            for &d in &e.shape {
                put_u32(&mut out, d, "dimension")?;
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n_meta = r.u32("metadata count")?;
        let mut metadata = Vec::new();
        for _ in 0..n_meta {
            let klen = r.u16("metadata key length")? as usize;
            let k = r.utf8(klen, "metadata key")?;
            let vlen = r.u32("metadata value length")? as usize;
            let v = r.utf8(vlen, "metadata value")?;
            metadata.push((k, v));
        }
        let n_entries = r.u32("entry count")?;
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..n_entries {
            let nlen = r.u16("name length")? as usize;
            let name = r.utf8(nlen, "entry name")?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format(format!("entry `{name}` has unsupported dtype {dtype}")));
            }
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dimension")? as usize);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("entry `{name}` is too large")))?;
            let raw = r.take(count.saturating_mul(4), "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            version,
            metadata,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u16::try_from(v).map_err(|_| Error::Format(format!("{what} length {v} exceeds u16")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }
}

/// Writes `model` to `path` and returns the checkpoint written.
pub fn save(model: &ModelGraph, path: &Path, extra: &[(&str, String)]) -> Result<Checkpoint> {
    let ckpt = Checkpoint::from_model(model, extra);
    ckpt.write(path)?;
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadPolicy {
    /// Every checkpoint entry must exist in the model with the same shape,
    /// and every model tensor must be present.
    Strict,
    /// Entries unknown to the model are skipped; shape mismatches are errors.
    SkipMissing,
    /// Unknown entries and shape mismatches are both skipped.
    SkipMismatched,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<Skipped>,
    /// Model tensors the checkpoint did not provide; left as they were.
    pub untouched: Vec<String>,
}

enum Slot {
    Param(usize),
    Mean(usize),
    Var(usize),
}

fn model_slots(model: &ModelGraph) -> Vec<(String, Slot, Vec<usize>)> {
    let mut slots: Vec<(String, Slot, Vec<usize>)> = model
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), Slot::Param(i), p.value.shape().to_vec()))
        .collect();
    for (i, (unit, st)) in model.bn_names().iter().zip(model.bn_states()).enumerate() {
        slots.push((format!("{unit}/moving_mean"), Slot::Mean(i), st.mean.shape().to_vec()));
        slots.push((format!("{unit}/moving_var"), Slot::Var(i), st.var.shape().to_vec()));
    }
    slots
}

/// Copies every checkpoint entry whose name and shape match a model tensor.
/// All entries are validated before anything is written, so a failing load
/// leaves the model untouched.
pub fn load_partial(model: &mut ModelGraph, ckpt: &Checkpoint, policy: LoadPolicy) -> Result<LoadReport> {
    let slots = model_slots(model);
    let by_name: HashMap<&str, usize> = slots.iter().enumerate().map(|(i, s)| (s.0.as_str(), i)).collect();
    let mut report = LoadReport::default();
    let mut problems = Vec::new();
    let mut plan = Vec::new();
    let mut provided = vec![false; slots.len()];
    for (ei, e) in ckpt.entries.iter().enumerate() {
        match by_name.get(e.name.as_str()) {
            None => match policy {
                LoadPolicy::Strict => problems.push(format!("`{}` is not a tensor of this model", e.name)),
                _ => report.skipped.push(Skipped {
                    name: e.name.clone(),
                    reason: "not in model".into(),
                }),
            },
            Some(&si) if slots[si].2 != e.shape => {
                let why = format!("shape {:?} in checkpoint, {:?} in model", e.shape, slots[si].2);
                match policy {
                    LoadPolicy::SkipMismatched => report.skipped.push(Skipped {
                        name: e.name.clone(),
                        reason: why,
                    }),
                    _ => problems.push(format!("`{}`: {why}", e.name)),
                }
            }
            Some(&si) => {
                provided[si] = true;
                plan.push((si, ei));
            }
        }
    }
    for (si, slot) in slots.iter().enumerate() {
        if !provided[si] {
            if policy == LoadPolicy::Strict && !problems.iter().any(|p| p.starts_with(&format!("`{}`", slot.0))) {
                problems.push(format!("`{}` missing from checkpoint", slot.0));
            }
            report.untouched.push(slot.0.clone());
        }
    }
    if !problems.is_empty() {
        return Err(Error::CheckpointMismatch(problems));
    }
    for (si, ei) in plan {
        let e = &ckpt.entries[ei];
        let target = match slots[si].1 {
            Slot::Param(i) => &mut model.params_mut()[i].value,
            Slot::Mean(i) => &mut model.bn_states_mut()[i].mean,
            Slot::Var(i) => &mut model.bn_states_mut()[i].var,
        };
        target.data_mut().copy_from_slice(&e.data);
        report.loaded.push(e.name.clone());
    }
    Ok(report)
}

/// Rebuilds the model recorded in `ckpt` and loads it strictly.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ModelGraph> {
    let cfg = ckpt.model_config()?;
    let mut model = ModelGraph::build(&cfg)?;
    load_partial(&mut model, ckpt, LoadPolicy::Strict)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let ckpt = Checkpoint {
            version: FORMAT_VERSION,
            metadata: vec![("k".into(), "v".into())],
            entries: vec![Entry {
                name: "w".into(),
                shape: vec![2],
                data: vec![1.0, -2.0],
            }],
        };
        let bytes = ckpt.to_bytes().unwrap();
        let mut expected = b"IRWT".to_vec();
        expected.extend([1, 0, 0, 0]);
        expected.extend([1, 0, 0, 0, 1, 0, b'k', 1, 0, 0, 0, b'v']);
        expected.extend([1, 0, 0, 0, 1, 0, b'w', 0, 1, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ckpt);
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let ckpt = Checkpoint {
            version: 1,
            metadata: vec![],
            entries: vec![Entry {
                name: "w".into(),
                shape: vec![3],
                data: vec![0.5; 3],
            }],
        };
        let bytes = ckpt.to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    }
}
