//! Binary container for weights, optimizer state and datasets.
//!
//! Layout: `LADDCKPT`, format version (u32 LE), header length (u32 LE), a
//! UTF-8 JSON header, then each tensor as little-endian `f64` values
//! followed by the CRC32 of those bytes (u32 LE). Manifest offsets are
//! byte positions within the payload.

use std::fs;
use std::path::Path;

use ladd_autodiff::{AdamState, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::LatentBatch;
use crate::distill::Distiller;
use crate::error::{io_err, LaddError, Result};
use crate::nets::{DenoiserArch, DenoiserParams, DiscHeadSet, HeadConfig, ParamStore};
use crate::rng::{LaddRng, RngState};
use crate::teacher::TeacherTrainer;

pub const MAGIC: &[u8; 8] = b"LADDCKPT";
pub const VERSION: u32 = 1;

fn bad(field: &'static str, reason: impl Into<String>) -> LaddError {
    LaddError::Checkpoint {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    /// Architecture of the main network, when the file holds one.
    pub arch: Option<DenoiserArch>,
    pub config_hash: String,
    pub rng: Option<RngState>,
    /// Free-form scalar state such as iteration counters.
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Named tensors plus header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Option<DenoiserArch>,
    pub config_hash: String,
    pub rng: Option<RngState>,
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Checkpoint {
            arch: None,
            config_hash: config_hash.into(),
            rng: None,
            meta: serde_json::Map::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (n, t) in store.names().iter().zip(store.tensors()) {
            self.push(format!("{prefix}{n}"), t.clone());
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad("tensors", format!("missing tensor `{name}`")))
    }

    /// Copies `prefix`-named tensors into `store`, checking names and shapes.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let tensors = store
            .names()
            .iter()
            .map(|n| self.tensor(&format!("{prefix}{n}")).cloned())
            .collect::<Result<Vec<_>>>()?;
        store.set_tensors(tensors).map_err(|e| bad("tensors", e.to_string()))
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("meta", format!("missing integer `{key}`")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta
            .get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| bad("meta", format!("missing number `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len() as u64,
            });
            let start = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&payload[start..]);
            payload.extend_from_slice(&crc.to_le_bytes());
        }
        let header = Header {
            arch: self.arch.clone(),
            config_hash: self.config_hash.clone(),
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad("header", e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| bad("header", "header too large"))?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("magic", "not a LADDCKPT file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad("version", format!("found {version}, expected {VERSION}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let json = bytes
            .get(16..16 + len)
            .ok_or_else(|| bad("header", "truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad("header", e.to_string()))?;
        let payload = &bytes[16 + len..];
        let mut pos = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.offset != pos {
                return Err(bad(
                    "tensors",
                    format!("`{}` at offset {} expected {pos}", e.name, e.offset),
                ));
            }
            let n: usize = e.shape.iter().product();
            let start = pos as usize;
            let end = start + 8 * n;
            let body = payload
                .get(start..end + 4)
                .ok_or_else(|| bad("payload", format!("truncated in `{}`", e.name)))?;
            let crc = u32::from_le_bytes(body[8 * n..].try_into().expect("4 bytes"));
            if crc32fast::hash(&body[..8 * n]) != crc {
                return Err(bad("payload", format!("checksum mismatch in `{}`", e.name)));
            }
            let data = body[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad("payload", format!("`{}`: {err}", e.name)))?;
            tensors.push((e.name.clone(), t));
            pos = (end + 4) as u64;
        }
        if pos as usize != payload.len() {
            return Err(bad(
                "payload",
                format!("{} trailing bytes", payload.len() - pos as usize),
            ));
        }
        Ok(Checkpoint {
            arch: header.arch,
            config_hash: header.config_hash,
            rng: header.rng,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_adam(ck: &mut Checkpoint, prefix: &str, names: &[String], adam: &AdamState) {
    for (n, m) in names.iter().zip(adam.first_moments()) {
        ck.push(format!("{prefix}m.{n}"), m.clone());
    }
    for (n, v) in names.iter().zip(adam.second_moments()) {
        ck.push(format!("{prefix}v.{n}"), v.clone());
    }
    let hyper = [
        ("lr", adam.lr),
        ("beta1", adam.beta1),
        ("beta2", adam.beta2),
        ("eps", adam.eps),
    ];
    for (k, v) in hyper {
        ck.meta.insert(format!("{prefix}{k}"), serde_json::json!(v));
    }
    ck.meta
        .insert(format!("{prefix}step"), serde_json::json!(adam.step_count()));
}

fn read_adam(ck: &Checkpoint, prefix: &str, names: &[String]) -> Result<AdamState> {
    let get = |kind: &str| -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| ck.tensor(&format!("{prefix}{kind}.{n}")).cloned())
            .collect()
    };
    AdamState::from_parts(
        ck.meta_f64(&format!("{prefix}lr"))?,
        ck.meta_f64(&format!("{prefix}beta1"))?,
        ck.meta_f64(&format!("{prefix}beta2"))?,
        ck.meta_f64(&format!("{prefix}eps"))?,
        ck.meta_u64(&format!("{prefix}step"))?,
        get("m")?,
        get("v")?,
    )
    .map_err(|e| bad("optimizer", e.to_string()))
}

fn restore_rng(ck: &Checkpoint) -> Result<LaddRng> {
    ck.rng
        .as_ref()
        .and_then(RngState::restore)
        .ok_or_else(|| bad("rng", "missing or malformed generator state"))
}

/// Denoiser weights with their architecture.
pub fn denoiser_checkpoint(p: &DenoiserParams, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(config_hash);
    ck.arch = Some(p.arch.clone());
    ck.meta.insert("frozen".into(), serde_json::json!(p.frozen));
    ck.push_store("", &p.params);
    ck
}

pub fn denoiser_from(ck: &Checkpoint) -> Result<DenoiserParams> {
    let arch = ck
        .arch
        .clone()
        .ok_or_else(|| bad("arch", "checkpoint holds no network"))?;
    let mut p = DenoiserParams::init(&arch, 0)?;
    ck.fill_store("", &mut p.params)?;
    p.frozen = ck.meta.get("frozen").and_then(|v| v.as_bool()).unwrap_or(true);
    Ok(p)
}

/// Labeled samples; labels are stored as an `f64` tensor `cond`.
pub fn dataset_checkpoint(batch: &LatentBatch, config_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint::new(config_hash);
    ck.push("x0", batch.x0.clone());
    let labels = batch.cond.iter().map(|&l| l as f64).collect();
    ck.push(
        "cond",
        Tensor::new(vec![batch.cond.len()], labels).expect("labels are finite and non-empty"),
    );
    ck
}

pub fn dataset_from(ck: &Checkpoint) -> Result<LatentBatch> {
    let x0 = ck.tensor("x0")?.clone();
    let cond = ck
        .tensor("cond")?
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(bad("payload", format!("label {v} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LatentBatch::new(x0, cond)
}

/// Full pretraining state for exact resumption.
pub fn trainer_checkpoint(t: &TeacherTrainer, config_hash: &str) -> Checkpoint {
    let mut ck = denoiser_checkpoint(&t.params, config_hash);
    push_adam(&mut ck, "adam.", t.params.params.names(), &t.adam);
    ck.rng = Some(RngState::capture(&t.rng));
    ck.meta.insert("iter".into(), serde_json::json!(t.iter));
    ck
}

/// Restores a trainer built from the same config.
pub fn restore_trainer(t: &mut TeacherTrainer, ck: &Checkpoint) -> Result<()> {
    if ck.arch.as_ref() != Some(&t.cfg.arch) {
        return Err(bad("arch", "checkpoint architecture differs from the config"));
    }
    ck.fill_store("", &mut t.params.params)?;
    t.adam = read_adam(ck, "adam.", t.params.params.names())?;
    t.rng = restore_rng(ck)?;
    t.iter = ck.meta_u64("iter")?;
    t.losses.clear();
    Ok(())
}

/// Student, heads, both optimizers and the generator position.
pub fn distiller_checkpoint(d: &Distiller, config_hash: &str) -> Checkpoint {
    let mut ck = denoiser_checkpoint(&d.student, config_hash);
    ck.push_store("heads.", &d.heads.params);
    push_adam(&mut ck, "adam_g.", d.student.params.names(), &d.adam_g);
    push_adam(&mut ck, "adam_d.", d.heads.params.names(), &d.adam_d);
    ck.rng = Some(RngState::capture(&d.rng));
    ck.meta.insert("iter".into(), serde_json::json!(d.iter));
    ck.meta.insert(
        "heads".into(),
        serde_json::to_value(&d.heads.config).expect("head config serializes"),
    );
    ck
}

/// Restores a distiller built from the same config, teacher and student arch.
pub fn restore_distiller(d: &mut Distiller, ck: &Checkpoint) -> Result<()> {
    if ck.arch.as_ref() != Some(&d.student.arch) {
        return Err(bad("arch", "checkpoint architecture differs from the student"));
    }
    let heads: HeadConfig = ck
        .meta
        .get("heads")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| bad("meta", "missing head config"))?;
    if heads != d.heads.config {
        return Err(bad("meta", "head config differs"));
    }
    ck.fill_store("", &mut d.student.params)?;
    ck.fill_store("heads.", &mut d.heads.params)?;
    d.adam_g = read_adam(ck, "adam_g.", d.student.params.names())?;
    d.adam_d = read_adam(ck, "adam_d.", d.heads.params.names())?;
    d.rng = restore_rng(ck)?;
    d.iter = ck.meta_u64("iter")?;
    Ok(())
}

/// Heads rebuilt around a teacher, for inspection of a distillation checkpoint.
pub fn heads_from(ck: &Checkpoint, teacher: &DenoiserArch) -> Result<DiscHeadSet> {
    let cfg: HeadConfig = ck
        .meta
        .get("heads")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .ok_or_else(|| bad("meta", "missing head config"))?;
    let mut h = DiscHeadSet::init(teacher, &cfg, 0)?;
    ck.fill_store("heads.", &mut h.params)?;
    Ok(h)
}
