//! Checkpoints: a JSON manifest plus one raw little-endian f64 payload.
//!
//! ```text
//! <dir>/manifest.json   schema version, config echo, tensor directory, sha256
//! <dir>/payload.bin     every tensor back to back
//! ```
//!
//! Optimizer moments are stored as extra payload entries named
//! `optim.m/<param>` and `optim.v/<param>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, HeadKind, ModelGraph};
use crate::block::AdapterConfig;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::optim::{Moments, OptimState};
use crate::tensor::{numel, Tensor};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

/// Enough structure to rebuild an empty [`ModelGraph`] of the right shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub adapter: Option<AdapterConfig>,
    pub head: Option<HeadKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub byte_len: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: Option<RunConfig>,
    pub model: ModelSpec,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub optim: Option<OptimState>,
    pub config: Option<RunConfig>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn model_spec(model: &ModelGraph) -> ModelSpec {
    ModelSpec {
        backbone: model.config.clone(),
        adapter: model.adapter_config.clone(),
        head: model.head.as_ref().map(|h| h.kind),
    }
}

/// Serializes the model (and optimizer) into the manifest and payload bytes.
pub fn encode(
    model: &ModelGraph,
    optim: Option<&OptimState>,
    config: Option<&RunConfig>,
) -> Result<(Manifest, Vec<u8>)> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor, frozen: bool, payload: &mut Vec<u8>| {
        let offset = payload.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            byte_len: payload.len() - offset,
            frozen,
        });
    };
    let named = model.named_tensors();
    for (name, _, t) in &named {
        push(name.clone(), t, !t.requires_grad, &mut payload);
    }
    if let Some(st) = optim {
        if st.moments.len() > named.len() {
            return Err(Error::Usage("optimizer state has more slots than the model has tensors".into()));
        }
        for ((name, _, t), mo) in named.iter().zip(&st.moments) {
            if let Some(mo) = mo {
                let m = Tensor::new(t.shape().to_vec(), mo.m.clone())?;
                let v = Tensor::new(t.shape().to_vec(), mo.v.clone())?;
                push(format!("optim.m/{name}"), &m, true, &mut payload);
                push(format!("optim.v/{name}"), &v, true, &mut payload);
            }
        }
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        config: config.cloned(),
        model: model_spec(model),
        optimizer_step: optim.map(|s| s.step),
        tensors,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    Ok((manifest, payload))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &ModelGraph,
    optim: Option<&OptimState>,
    config: Option<&RunConfig>,
) -> Result<()> {
    let (manifest, payload) = encode(model, optim, config)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join(PAYLOAD_FILE), &payload)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())
}

/// Rebuilds a checkpoint from its manifest and payload, verifying the
/// schema version, payload hash and tensor directory.
pub fn decode(manifest: &Manifest, payload: &[u8]) -> Result<Checkpoint> {
    if manifest.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Version {
            found: manifest.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let digest = hex(&Sha256::digest(payload));
    if digest != manifest.payload_sha256 {
        return Err(Error::Integrity(format!(
            "payload sha256 {digest} does not match manifest {}",
            manifest.payload_sha256
        )));
    }
    let mut cursor = 0;
    for e in &manifest.tensors {
        if e.offset != cursor || e.byte_len != 8 * numel(&e.shape) {
            return Err(Error::Integrity(format!("tensor {} has a bad offset or length", e.name)));
        }
        cursor += e.byte_len;
    }
    if cursor != payload.len() {
        return Err(Error::Integrity(format!(
            "directory covers {cursor} bytes but the payload has {}",
            payload.len()
        )));
    }
    let read = |e: &TensorEntry| -> Result<Tensor> {
        let data = payload[e.offset..e.offset + e.byte_len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(e.shape.clone(), data)
    };
    let by_name: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|e| (e.name.as_str(), e)).collect();
    if by_name.len() != manifest.tensors.len() {
        return Err(Error::Integrity("duplicate tensor names".into()));
    }

    let spec = &manifest.model;
    let mut model = ModelGraph::build(&spec.backbone, 0)?;
    if let Some(a) = &spec.adapter {
        model.insert_adapters(a, 0)?;
    }
    if let Some(h) = spec.head {
        model.attach_head(h, 0)?;
    }
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _, _)| n).collect();
    let mut moments = Vec::with_capacity(names.len());
    let mut used = 0;
    for (t, name) in model.tensors_mut().into_iter().zip(&names) {
        let e = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::Integrity(format!("tensor {name} missing from checkpoint")))?;
        if e.shape != t.shape() {
            return Err(Error::Integrity(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                e.shape,
                t.shape()
            )));
        }
        let loaded = read(e)?;
        *t = loaded.with_requires_grad(!e.frozen);
        used += 1;
        let m = by_name.get(format!("optim.m/{name}").as_str());
        let v = by_name.get(format!("optim.v/{name}").as_str());
        moments.push(match (m, v) {
            (Some(m), Some(v)) => {
                used += 2;
                Some(Moments {
                    m: read(m)?.into_data(),
                    v: read(v)?.into_data(),
                })
            }
            (None, None) => None,
            _ => return Err(Error::Integrity(format!("incomplete optimizer moments for {name}"))),
        });
    }
    if used != manifest.tensors.len() {
        return Err(Error::Integrity("checkpoint holds tensors the model does not have".into()));
    }
    let optim = manifest.optimizer_step.map(|step| OptimState { step, moments });
    Ok(Checkpoint {
        model,
        optim,
        config: manifest.config.clone(),
    })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PAYLOAD_FILE);
    let payload = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode(&manifest, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskConfig;

    fn model() -> ModelGraph {
        let cfg = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        cfg.build_model().unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut g = model();
        g.backbone[3].requires_grad = true;
        let mut st = OptimState::new();
        for t in g.tensors_mut() {
            if t.requires_grad {
                t.grad = Some(vec![0.5; t.len()]);
            }
        }
        crate::optim::adamw_step(&mut g.tensors_mut(), &mut st, &Default::default(), 1.0).unwrap();
        for t in g.tensors_mut() {
            t.grad = None;
        }
        let (m, p) = encode(&g, Some(&st), None).unwrap();
        let back = decode(&m, &p).unwrap();
        assert_eq!(back.model, g);
        assert_eq!(back.optim.as_ref(), Some(&st));
        let (m2, p2) = encode(&back.model, back.optim.as_ref(), None).unwrap();
        assert_eq!(p, p2);
        assert_eq!(m, m2);
    }

    #[test]
    fn corruption_is_detected() {
        let (m, mut p) = encode(&model(), None, None).unwrap();
        p[17] ^= 0x40;
        assert!(matches!(decode(&m, &p), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_mismatch() {
        let (mut m, p) = encode(&model(), None, None).unwrap();
        m.schema_version = 2;
        assert!(matches!(decode(&m, &p), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn directory_must_cover_payload() {
        let (mut m, p) = encode(&model(), None, None).unwrap();
        m.tensors.pop();
        assert!(matches!(decode(&m, &p), Err(Error::Integrity(_))));
    }

    #[test]
    fn files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let g = model();
        let cfg = RunConfig {
            task: TaskConfig::default(),
            ..RunConfig::default()
        };
        save_checkpoint(dir.path(), &g, None, Some(&cfg)).unwrap();
        let c = load_checkpoint(dir.path()).unwrap();
        assert_eq!(c.model, g);
        assert_eq!(c.config, Some(cfg));
        assert!(c.optim.is_none());
        assert!(load_checkpoint(&dir.path().join("nope")).is_err());
    }
}
