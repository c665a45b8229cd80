//! Single-file model/optimizer archive.
//!
//! ```text
//! "CASNCKPT"            8 bytes magic
//! version               u32 little-endian
//! header length         u64 little-endian
//! header                UTF-8 JSON (see `Header`)
//! tensor data           f64 little-endian, tensors back to back in table order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use casn_grad::{Array, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{CasnModel, ModelConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::{Module, Slot};

pub const MAGIC: &[u8; 8] = b"CASNCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
    /// Optimizer velocity of the parameter of the same name.
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// Run configuration as TOML.
    pub config: String,
    pub model: ModelConfig,
    /// SHA-256 of the model configuration's JSON form.
    pub fingerprint: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Raw train identity of each class index.
    pub identities: Vec<u32>,
    pub tensors: Vec<TensorEntry>,
    /// SHA-256 of the data section.
    pub data_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fingerprint(model: &ModelConfig) -> String {
    hex(&Sha256::digest(serde_json::to_vec(model).expect("model config serialises")))
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<(TensorKind, String), Array>,
}

impl Checkpoint {
    /// Snapshot of `model` (parameters and batch-norm buffers) plus the
    /// optimizer velocities.
    pub fn capture(
        model: &mut CasnModel,
        velocity: &BTreeMap<String, Array>,
        config: &RunConfig,
        epoch: usize,
        identities: &[u32],
    ) -> Self {
        let mut tensors = BTreeMap::new();
        let mut order = Vec::new();
        model.visit("", &mut |name, slot| {
            let (kind, value) = match slot {
                Slot::Param(t) => (TensorKind::Param, t.value().clone()),
                Slot::Buffer(a) => (TensorKind::Buffer, a.clone()),
            };
            order.push((kind, name.to_string()));
            tensors.insert((kind, name.to_string()), value);
        });
        for (name, v) in velocity {
            order.push((TensorKind::Momentum, name.clone()));
            tensors.insert((TensorKind::Momentum, name.clone()), v.clone());
        }
        let mut offset = 0;
        let entries = order
            .into_iter()
            .map(|(kind, name)| {
                let shape = tensors[&(kind, name.clone())].shape().to_vec();
                let e = TensorEntry {
                    name,
                    kind,
                    shape,
                    offset,
                };
                offset += tensors[&(kind, e.name.clone())].len();
                e
            })
            .collect();
        let model_cfg = model.config().clone();
        Self {
            header: Header {
                config: config.to_toml(),
                fingerprint: fingerprint(&model_cfg),
                model: model_cfg,
                seed: config.seed,
                epoch,
                identities: identities.to_vec(),
                tensors: entries,
                data_sha256: String::new(),
            },
            tensors,
        }
    }

    fn data_bytes(&self) -> Vec<u8> {
        self.header
            .tensors
            .iter()
            .flat_map(|e| self.tensors[&(e.kind, e.name.clone())].data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let data = self.data_bytes();
        let mut header = self.header.clone();
        header.data_sha256 = hex(&Sha256::digest(&data));
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let data = &bytes[20 + hlen..];
        if hex(&Sha256::digest(data)) != header.data_sha256 {
            return Err(bad("tensor data checksum mismatch"));
        }
        if header.fingerprint != fingerprint(&header.model) {
            return Err(bad("model fingerprint does not match the stored model configuration"));
        }
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset * 8..(e.offset + n) * 8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the data section", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert((e.kind, e.name.clone()), Array::new(e.shape.clone(), values));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_toml(&self.header.config)
    }

    /// Fails with the mismatching dimensions when the checkpoint was saved
    /// for a different model shape.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let have = &self.header.model;
        let mut diffs = Vec::new();
        if have.num_classes != expected.num_classes {
            diffs.push(format!("num_classes: checkpoint {} vs expected {}", have.num_classes, expected.num_classes));
        }
        if have.head_hidden != expected.head_hidden {
            diffs.push(format!("head_hidden: checkpoint {} vs expected {}", have.head_hidden, expected.head_hidden));
        }
        if have.backbone.feature_dim() != expected.backbone.feature_dim() {
            diffs.push(format!(
                "feature_dim: checkpoint {} vs expected {}",
                have.backbone.feature_dim(),
                expected.backbone.feature_dim()
            ));
        }
        if have.backbone != expected.backbone && diffs.is_empty() {
            diffs.push(format!("backbone layout: checkpoint {:?} vs expected {:?}", have.backbone, expected.backbone));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("incompatible checkpoint: {}", diffs.join("; "))))
        }
    }

    /// Rebuild the stored model.
    pub fn model(&self) -> Result<CasnModel> {
        let mut model = CasnModel::new(&self.header.model, self.header.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copy parameters and buffers into `model`, checking every shape.
    pub fn load_into(&self, model: &mut CasnModel) -> Result<()> {
        self.check_compatible(model.config())?;
        let mut err = None;
        model.visit("", &mut |name, slot| {
            if err.is_some() {
                return;
            }
            let kind = match slot {
                Slot::Param(_) => TensorKind::Param,
                Slot::Buffer(_) => TensorKind::Buffer,
            };
            let Some(stored) = self.tensors.get(&(kind, name.to_string())) else {
                err = Some(Error::Checkpoint(format!("checkpoint lacks tensor {name}")));
                return;
            };
            let target_shape = match &slot {
                Slot::Param(t) => t.shape().to_vec(),
                Slot::Buffer(a) => a.shape().to_vec(),
            };
            if stored.shape() != target_shape.as_slice() {
                err = Some(Error::Checkpoint(format!(
                    "tensor {name}: checkpoint shape {:?} vs model shape {:?}",
                    stored.shape(),
                    target_shape
                )));
                return;
            }
            match slot {
                Slot::Param(t) => *t = Tensor::variable(stored.clone()),
                Slot::Buffer(a) => *a = stored.clone(),
            }
        });
        err.map_or(Ok(()), Err)
    }

    /// Stored optimizer velocities by parameter name.
    pub fn velocity(&self) -> BTreeMap<String, Array> {
        self.tensors
            .iter()
            .filter(|((k, _), _)| *k == TensorKind::Momentum)
            .map(|((_, n), a)| (n.clone(), a.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(classes: usize) -> (CasnModel, RunConfig) {
        let cfg = RunConfig::synthetic("unused");
        (CasnModel::new(&cfg.model_config(classes).unwrap(), 3).unwrap(), cfg)
    }

    #[test]
    fn roundtrip_restores_every_tensor() {
        let (mut model, cfg) = small_model(5);
        let mut vel = BTreeMap::new();
        vel.insert("ide_head.fc2.bias".to_string(), Array::full(&[1, 5], 0.25));
        let ck = Checkpoint::capture(&mut model, &vel, &cfg, 4, &[1, 2, 3, 5, 8]);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.header.epoch, 4);
        assert_eq!(back.header.identities, vec![1, 2, 3, 5, 8]);
        assert_eq!(back.velocity(), vel);
        let mut restored = back.model().unwrap();
        let a = model.named_parameters();
        let b = restored.named_parameters();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.value(), tb.value());
        }
        assert_eq!(back.run_config().unwrap(), cfg);
    }

    #[test]
    fn mismatched_dims_are_named() {
        let (mut model, cfg) = small_model(5);
        let ck = Checkpoint::capture(&mut model, &BTreeMap::new(), &cfg, 1, &[0, 1, 2, 3, 4]);
        let (mut other, _) = small_model(7);
        let err = ck.load_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("num_classes") && err.contains('5') && err.contains('7'), "{err}");
    }

    #[test]
    fn corruption_is_detected() {
        let (mut model, cfg) = small_model(3);
        let mut bytes = Checkpoint::capture(&mut model, &BTreeMap::new(), &cfg, 1, &[1, 2, 3]).to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT0000000000000000").is_err());
    }
}
