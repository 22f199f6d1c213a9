//! Binary checkpoint layout:
//!
//! ```text
//! "MAPRE\x01" | u64 LE metadata length | metadata JSON | f64 LE arrays | u32 LE CRC-32
//! ```
//!
//! The CRC covers every byte before it. Arrays appear in manifest order;
//! manifest offsets are byte offsets from the start of the array section.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MapreModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::AdamW;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 6] = b"MAPRE\x01";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// First and second moments, one array per parameter in store order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    /// Free-form snapshot of the run configuration that produced the model.
    pub run_config: serde_json::Value,
    pub step: u64,
    pub params: Vec<NamedArray>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    version: u32,
    config: MetadataConfig,
    step: u64,
    params: Vec<ManifestEntry>,
    optimizer_step: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct MetadataConfig {
    model: ModelConfig,
    run: serde_json::Value,
}

const OPT_M: &str = "optimizer.m/";
const OPT_V: &str = "optimizer.v/";

impl Checkpoint {
    pub fn from_model(model: &MapreModel, step: u64, run_config: serde_json::Value) -> Self {
        let params = model
            .store
            .ids()
            .map(|id| {
                let t = model.store.get(id);
                NamedArray {
                    name: model.store.name(id).to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                }
            })
            .collect();
        Self { version: FORMAT_VERSION, model: model.config.clone(), run_config, step, params, optimizer: None }
    }

    pub fn with_optimizer(mut self, model: &MapreModel, adam: &AdamW) -> Self {
        let (m, v) = model
            .store
            .ids()
            .map(|id| {
                let (m, v) = adam.moments(id);
                (m.to_vec(), v.to_vec())
            })
            .unzip();
        self.optimizer = Some(OptimizerState { step: adam.step_count(), m, v });
        self
    }

    /// Rebuilds the model, creating the task heads the checkpoint contains.
    pub fn to_model(&self) -> Result<MapreModel> {
        let mut model = MapreModel::new(self.model.clone(), 0)?;
        for p in &self.params {
            if model.store.find(&p.name).is_none() {
                match p.name.as_str() {
                    "head_l.weight" if p.shape.len() == 2 => {
                        model.add_head_l(p.shape[1], 0)?;
                    }
                    "head_r.weight" => {
                        model.add_head_r(0)?;
                    }
                    _ => {}
                }
            }
            let id = model
                .store
                .find(&p.name)
                .ok_or_else(|| Error::CheckpointFormat(format!("unexpected parameter `{}`", p.name)))?;
            if model.store.get(id).shape() != p.shape.as_slice() {
                return Err(Error::CheckpointFormat(format!(
                    "parameter `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    p.shape,
                    model.store.get(id).shape()
                )));
            }
            model.store.set_values(id, &p.data)?;
        }
        if model.store.len() != self.params.len() {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays: Vec<(String, &[usize], &[f64])> =
            self.params.iter().map(|p| (p.name.clone(), p.shape.as_slice(), p.data.as_slice())).collect();
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != self.params.len() || opt.v.len() != self.params.len() {
                return Err(Error::CheckpointFormat("optimizer state does not match the parameters".into()));
            }
            for (p, m) in self.params.iter().zip(&opt.m) {
                arrays.push((format!("{OPT_M}{}", p.name), p.shape.as_slice(), m.as_slice()));
            }
            for (p, v) in self.params.iter().zip(&opt.v) {
                arrays.push((format!("{OPT_V}{}", p.name), p.shape.as_slice(), v.as_slice()));
            }
        }
        let mut manifest = Vec::with_capacity(arrays.len());
        let mut offset = 0u64;
        for (name, shape, data) in &arrays {
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::CheckpointFormat(format!("array `{name}` does not match its shape")));
            }
            manifest.push(ManifestEntry { name: name.clone(), shape: shape.to_vec(), offset });
            offset += 8 * data.len() as u64;
        }
        let meta = Metadata {
            version: self.version,
            config: MetadataConfig { model: self.model.clone(), run: self.run_config.clone() },
            step: self.step,
            params: manifest,
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset as usize + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &arrays {
            for x in *data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let head = &bytes[..bytes.len().min(MAGIC.len())];
        if head != &MAGIC[..head.len()] {
            return Err(Error::CheckpointMagic);
        }
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::CheckpointTruncated(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let json_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
        let json_end =
            14usize.checked_add(json_len).ok_or_else(|| Error::CheckpointFormat("metadata length overflows".into()))?;
        if bytes.len() < json_end {
            return Err(Error::CheckpointTruncated(format!("metadata needs {json_len} bytes")));
        }
        let meta: Metadata = serde_json::from_slice(&bytes[14..json_end])
            .map_err(|e| Error::CheckpointFormat(format!("metadata: {e}")))?;
        if meta.version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: meta.version, expected: FORMAT_VERSION });
        }
        let data_len: usize = meta.params.iter().map(|p| 8 * p.shape.iter().product::<usize>()).sum();
        let expected = json_end + data_len + 4;
        if bytes.len() < expected {
            return Err(Error::CheckpointTruncated(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        if bytes.len() > expected {
            return Err(Error::CheckpointFormat(format!("{} trailing bytes", bytes.len() - expected)));
        }
        let body = &bytes[..expected - 4];
        let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::CheckpointChecksum { stored, computed });
        }

        let section = &bytes[json_end..expected - 4];
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut cursor = 0u64;
        for entry in meta.params {
            if entry.offset != cursor {
                return Err(Error::CheckpointFormat(format!("array `{}` is not contiguous", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let start = cursor as usize;
            let data: Vec<f64> = section[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += 8 * n as u64;
            if entry.name.starts_with(OPT_M) {
                m.push(data);
            } else if entry.name.starts_with(OPT_V) {
                v.push(data);
            } else {
                params.push(NamedArray { name: entry.name, shape: entry.shape, data });
            }
        }
        let optimizer = match meta.optimizer_step {
            Some(step) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::CheckpointFormat("incomplete optimizer state".into()));
                }
                Some(OptimizerState { step, m, v })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::CheckpointFormat("optimizer arrays without an optimizer step".into())),
        };
        Ok(Self {
            version: meta.version,
            model: meta.config.model,
            run_config: meta.config.run,
            step: meta.step,
            params,
            optimizer,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::Path { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Path { path: path.to_path_buf(), message: e.to_string() })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::tensor::AdamWConfig;

    fn model() -> MapreModel {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                model_dim: 8,
                num_heads: 2,
                feedforward_dim: 16,
                num_layers: 1,
                vocab_size: 20,
                max_len: 10,
                dropout: 0.0,
            },
            ..Default::default()
        };
        let mut m = MapreModel::new(cfg, 6).unwrap();
        m.add_head_r(1).unwrap();
        m.add_head_l(3, 2).unwrap();
        m
    }

    fn bytes() -> Vec<u8> {
        Checkpoint::from_model(&model(), 7, serde_json::json!({"note": "x"})).to_bytes().unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let b = bytes();
        let ck = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(ck.step, 7);
        let m = ck.to_model().unwrap();
        let again = Checkpoint::from_model(&m, 7, ck.run_config.clone()).to_bytes().unwrap();
        assert_eq!(b, again);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let m = model();
        let mut adam = AdamW::new(AdamWConfig::default(), &m.store);
        let n = m.store.len();
        let moments =
            |k: f64| (0..n).map(|i| vec![k * i as f64; m.store.get(crate::tensor::ParamId(i)).numel()]).collect();
        adam.restore(4, moments(0.5), moments(0.25)).unwrap();
        let ck = Checkpoint::from_model(&m, 1, serde_json::Value::Null).with_optimizer(&m, &adam);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.optimizer.unwrap().step, 4);
    }

    #[test]
    fn distinct_errors() {
        let b = bytes();
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::CheckpointMagic)));
        assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - 10]), Err(Error::CheckpointTruncated(_))));
        assert!(matches!(Checkpoint::from_bytes(&b[..10]), Err(Error::CheckpointTruncated(_))));
        let mut flipped = b.clone();
        let last_data = b.len() - 5;
        flipped[last_data] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::CheckpointChecksum { .. })));

        let mut ck = Checkpoint::from_bytes(&b).unwrap();
        ck.version = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&ck.to_bytes().unwrap()),
            Err(Error::CheckpointVersion { found: 2, expected: 1 })
        ));
    }
}
