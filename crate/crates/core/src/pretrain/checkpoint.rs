//! Checkpoint directory: `manifest.json` describing every tensor plus
//! `tensors.bin` holding their little-endian f32 payloads back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SpatialVocab;
use crate::error::{Error, Result};
use crate::numerics::{AdamWConfig, OptimState, ParamStore};
use crate::pretrain::{Model, ModelConfig, PretrainCfg, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PAYLOAD: &str = "tensors.bin";
const MOMENT1: &str = "optim.m/";
const MOMENT2: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimMeta {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub pretrain: PretrainCfg,
    pub vocab: SpatialVocab,
    pub epoch: usize,
    pub step: u64,
    pub batch_in_epoch: usize,
    pub optimizer: OptimMeta,
    /// Free-form run description (resolved config, training sessions).
    pub run: serde_json::Value,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn push_tensor(bytes: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, shape: &[usize], data: &[f32]) {
    let offset = bytes.len() as u64;
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    entries.push(TensorEntry {
        name,
        dtype: "f32".into(),
        shape: shape.to_vec(),
        offset,
        nbytes: data.len() as u64 * 4,
    });
}

fn temp_sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Writes the trainer state to `dir` via a temporary sibling directory that
/// replaces `dir` by rename once complete.
pub fn save_checkpoint(trainer: &Trainer, dir: &Path, run: serde_json::Value) -> Result<()> {
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for (_, p) in trainer.store.iter() {
        push_tensor(&mut bytes, &mut entries, p.name.clone(), p.tensor.shape(), p.tensor.data());
    }
    for (id, p) in trainer.store.iter() {
        push_tensor(&mut bytes, &mut entries, format!("{MOMENT1}{}", p.name), p.tensor.shape(), &trainer.opt.m[id.index()]);
        push_tensor(&mut bytes, &mut entries, format!("{MOMENT2}{}", p.name), p.tensor.shape(), &trainer.opt.v[id.index()]);
    }
    let cfg = trainer.opt.cfg;
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model: trainer.model.cfg.clone(),
        pretrain: trainer.cfg.clone(),
        vocab: trainer.model.spatial.vocab.clone(),
        epoch: trainer.epoch,
        step: trainer.step,
        batch_in_epoch: trainer.batch_in_epoch,
        optimizer: OptimMeta {
            t: trainer.opt.t,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        },
        run,
        sha256: hex::encode(Sha256::digest(&bytes)),
        tensors: entries,
    };

    let tmp = temp_sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    fs::write(tmp.join(PAYLOAD), &bytes)?;
    fs::write(tmp.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    if dir.exists() {
        let old = temp_sibling(dir, "old");
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Corruption("manifest lacks a format_version".into()))? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::Incompatible {
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(serde_json::from_value(raw)?)
}

/// Restores a trainer exactly as saved, including optimizer moments and the
/// position within the epoch sequence.
pub fn load_checkpoint(dir: &Path) -> Result<(Trainer, Manifest)> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(PAYLOAD))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(Error::Corruption(format!(
            "{PAYLOAD} checksum {digest} does not match manifest {}",
            manifest.sha256
        )));
    }
    let (model, mut store) = Model::new(&manifest.model, manifest.vocab.clone(), 0)?;
    let mut opt = OptimState::new(
        &store,
        AdamWConfig {
            beta1: manifest.optimizer.beta1,
            beta2: manifest.optimizer.beta2,
            eps: manifest.optimizer.eps,
            weight_decay: manifest.optimizer.weight_decay,
        },
    );
    opt.t = manifest.optimizer.t;

    let mut seen = vec![[false; 3]; store.len()];
    for e in &manifest.tensors {
        let end = e.offset + e.nbytes;
        if e.dtype != "f32" || end as usize > bytes.len() {
            return Err(Error::Format {
                offset: e.offset,
                msg: format!("tensor `{}` ({}, {} bytes) does not fit the payload", e.name, e.dtype, e.nbytes),
            });
        }
        let (kind, base) = if let Some(b) = e.name.strip_prefix(MOMENT1) {
            (1, b)
        } else if let Some(b) = e.name.strip_prefix(MOMENT2) {
            (2, b)
        } else {
            (0, e.name.as_str())
        };
        let id = store
            .id(base)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor `{}` is not part of the model", e.name)))?;
        if store.tensor(id).shape() != e.shape.as_slice() || e.nbytes as usize != store.tensor(id).numel() * 4 {
            return Err(Error::Config(format!(
                "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                e.name,
                e.shape,
                store.tensor(id).shape()
            )));
        }
        let values: Vec<f32> = bytes[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        match kind {
            0 => store.tensor_mut(id).data_mut().copy_from_slice(&values),
            1 => opt.m[id.index()] = values,
            _ => opt.v[id.index()] = values,
        }
        if seen[id.index()][kind] {
            return Err(Error::Corruption(format!("tensor `{}` listed twice", e.name)));
        }
        seen[id.index()][kind] = true;
    }
    if let Some((i, _)) = seen.iter().enumerate().find(|(_, s)| !s[0]) {
        return Err(Error::Config(format!(
            "checkpoint lacks model tensor `{}`",
            store.name(store.ids().nth(i).expect("index in range"))
        )));
    }
    let mut trainer = Trainer::new(model, store, manifest.pretrain.clone());
    trainer.opt = opt;
    trainer.epoch = manifest.epoch;
    trainer.step = manifest.step;
    trainer.batch_in_epoch = manifest.batch_in_epoch;
    Ok((trainer, manifest))
}

/// Model and parameters only, for downstream use.
pub fn load_model(dir: &Path) -> Result<(Model, ParamStore<f32>, Manifest)> {
    let (t, m) = load_checkpoint(dir)?;
    Ok((t.model, t.store, m))
}
