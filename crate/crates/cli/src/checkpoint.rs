//! Binary checkpoint format.
//!
//! ```text
//! "HYDR" | version: u32 LE | manifest_len: u32 LE | manifest (JSON)
//!        | payload (little-endian f32 or f64) | CRC32(payload): u32 LE
//! ```
//!
//! The manifest maps each tensor name to its shape, dtype, byte offset into
//! the payload and role. Tensors are laid out contiguously in the model's
//! canonical parameter order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use hydra_peft::{Matrix, MicroTransformer, Mode, ModelConfig, Rng, Role};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"HYDR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// Rounds `v` to what this dtype stores.
    pub fn round(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub dtype: Dtype,
    pub byte_offset: usize,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub mode: Mode,
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Free-form provenance (seed, variant, source checkpoint, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub role: Role,
    pub value: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub mode: Mode,
    pub dtype: Dtype,
    /// Canonical order.
    pub tensors: Vec<Tensor>,
    pub meta: serde_json::Value,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Snapshot of `model`, rounded to `dtype`.
    pub fn from_model(model: &MicroTransformer, dtype: Dtype, meta: serde_json::Value) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(name, m, role)| Tensor {
                name,
                role,
                value: m.map(|v| dtype.round(v)),
            })
            .collect();
        Self {
            config: model.config.clone(),
            mode: model.mode(),
            dtype,
            tensors,
            meta,
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn to_model(&self) -> CliResult<MicroTransformer> {
        let mut model = MicroTransformer::build(&self.config, &mut Rng::new(0))?;
        model.set_mode(self.mode);
        let by_name: HashMap<&str, &Tensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != self.tensors.len() {
            return Err(bad("duplicate tensor names"));
        }
        let mut seen = 0usize;
        let mut problem = None;
        model.visit_params_mut(&mut |name, m, role| {
            match by_name.get(name.as_str()) {
                Some(t) if t.role == role && t.value.shape() == m.shape() => {
                    *m = t.value.clone();
                    seen += 1;
                }
                Some(t) => {
                    problem.get_or_insert(format!(
                        "{name}: stored {} {} vs expected {} {}",
                        t.role.as_str(),
                        t.value.shape(),
                        role.as_str(),
                        m.shape()
                    ));
                }
                None => {
                    problem.get_or_insert(format!("missing tensor {name}"));
                }
            }
        });
        if let Some(p) = problem {
            return Err(bad(p));
        }
        if seen != self.tensors.len() {
            return Err(bad(format!(
                "{} tensors stored but the model has {seen}",
                self.tensors.len()
            )));
        }
        Ok(model)
    }

    pub fn count(&self, role: Role) -> usize {
        self.tensors.iter().filter(|t| t.role == role).map(|t| t.value.len()).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> CliResult<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = BTreeMap::new();
        for t in &self.tensors {
            let entry = TensorEntry {
                shape: [t.value.rows(), t.value.cols()],
                dtype: self.dtype,
                byte_offset: payload.len(),
                role: t.role,
            };
            if entries.insert(t.name.clone(), entry).is_some() {
                return Err(bad(format!("duplicate tensor {}", t.name)));
            }
            for &v in t.value.as_slice() {
                match self.dtype {
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let manifest = Manifest {
            model: self.config.clone(),
            mode: self.mode,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let manifest = serde_json::to_vec(&manifest).map_err(|e| bad(e.to_string()))?;
        let manifest_len = u32::try_from(manifest.len()).map_err(|_| bad("manifest too large"))?;

        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> CliResult<Self> {
        let word = |at: usize| -> CliResult<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| bad("truncated header"))
        };
        if bytes.get(..4) != Some(MAGIC.as_slice()) {
            return Err(bad("bad magic"));
        }
        let version = word(4)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let manifest_len = word(8)? as usize;
        let payload_start = 12 + manifest_len;
        if bytes.len() < payload_start + 4 {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| bad(format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..bytes.len() - 4];
        let stored_crc = word(bytes.len() - 4)?;
        let crc = crc32fast::hash(payload);
        if crc != stored_crc {
            return Err(bad(format!("CRC mismatch: stored {stored_crc:08x}, computed {crc:08x}")));
        }

        let mut entries: Vec<(&String, &TensorEntry)> = manifest.tensors.iter().collect();
        entries.sort_by_key(|(_, e)| e.byte_offset);
        let dtype = entries.first().map_or(Dtype::F32, |(_, e)| e.dtype);
        let mut cursor = 0usize;
        let mut tensors = Vec::with_capacity(entries.len());
        for (name, e) in entries {
            if e.dtype != dtype {
                return Err(bad("mixed dtypes"));
            }
            if e.byte_offset != cursor {
                return Err(bad(format!("{name}: offset {} but expected {cursor}", e.byte_offset)));
            }
            let n = e.shape[0] * e.shape[1];
            let end = cursor + n * dtype.size();
            let raw = payload.get(cursor..end).ok_or_else(|| bad(format!("{name} overruns payload")))?;
            let data: Vec<f64> = match dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.push(Tensor {
                name: name.clone(),
                role: e.role,
                value: Matrix::new(e.shape[0], e.shape[1], data)?,
            });
            cursor = end;
        }
        if cursor != payload.len() {
            return Err(bad(format!("{} unclaimed payload bytes", payload.len() - cursor)));
        }
        Ok(Self {
            config: manifest.model,
            mode: manifest.mode,
            dtype,
            tensors,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(CliError::io(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MicroTransformer {
        let cfg = ModelConfig {
            embed_dim: 8,
            mlp_hidden: 16,
            heads: 2,
            blocks: 2,
            ..ModelConfig::default()
        };
        let mut m = MicroTransformer::build(&cfg, &mut Rng::new(1)).unwrap();
        m.set_mode(Mode::Finetune);
        m
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let m = model();
        let ck = Checkpoint::from_model(&m, Dtype::F64, serde_json::json!({"seed": 1}));
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_model().unwrap(), m);
    }

    #[test]
    fn f32_round_trip_is_stable() {
        let ck = Checkpoint::from_model(&model(), Dtype::F32, serde_json::Value::Null);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let again = Checkpoint::from_model(&back.to_model().unwrap(), Dtype::F32, serde_json::Value::Null);
        assert_eq!(again.encode().unwrap(), bytes);
    }

    #[test]
    fn roles_partition_tensors() {
        let m = model();
        let ck = Checkpoint::from_model(&m, Dtype::F32, serde_json::Value::Null);
        let total: usize = [Role::Frozen, Role::Adapter, Role::Head].iter().map(|&r| ck.count(r)).sum();
        assert_eq!(total, m.total_param_count());
        assert_eq!(ck.count(Role::Adapter), m.param_count(Role::Adapter));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::from_model(&model(), Dtype::F32, serde_json::Value::Null)
            .encode()
            .unwrap();
        let mut flipped = bytes.clone();
        let at = bytes.len() - 40;
        flipped[at] ^= 0x01;
        let err = Checkpoint::decode(&flipped).unwrap_err();
        assert!(err.to_string().contains("CRC"), "{err}");

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn mismatched_config_rejected() {
        let mut ck = Checkpoint::from_model(&model(), Dtype::F64, serde_json::Value::Null);
        ck.config.embed_dim = 16;
        ck.config.mlp_hidden = 32;
        assert!(matches!(ck.to_model(), Err(CliError::Checkpoint(_))));
        ck.tensors.pop();
        assert!(ck.to_model().is_err());
    }
}
