//! Checkpoint directories: `manifest.json` plus a little-endian `f32` blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use deca_core::data::ViewTag;
use deca_core::model::Deca;
use deca_core::train::{AdamState, Trainer};
use deca_core::ParamStore;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub t: u64,
    /// Byte offsets of each parameter's first and second moments.
    pub m_offsets: Vec<u64>,
    pub v_offsets: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: RunConfig,
    pub seed: u64,
    pub step: u64,
    pub train_view: Option<ViewTag>,
    pub loss_weights: BTreeMap<String, f32>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub blob_bytes: u64,
}

/// A model with its parameters and, when saved during training, the
/// optimizer state.
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Deca,
    pub store: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
    pub step: u64,
    pub train_view: Option<ViewTag>,
}

impl Checkpoint {
    /// Fresh model for `config`, seeded by `config.train.seed`.
    pub fn init(config: RunConfig) -> CliResult<Self> {
        let mut store = ParamStore::new();
        let model = Deca::new(config.model.clone(), &mut store, config.train.seed)?;
        Ok(Self { config, model, store, adam: None, step: 0, train_view: None })
    }

    pub fn from_trainer(config: RunConfig, trainer: Trainer<f32>, train_view: Option<ViewTag>) -> Self {
        Self {
            config,
            model: trainer.model,
            store: trainer.store,
            adam: Some(trainer.adam),
            step: trainer.step,
            train_view,
        }
    }

    /// Trainer continuing from this checkpoint.
    pub fn into_trainer(self) -> CliResult<Trainer<f32>> {
        let mut t = Trainer::new(self.model, self.store, self.config.train.clone())?;
        if let Some(a) = self.adam {
            t.adam = a;
        }
        t.step = self.step;
        Ok(t)
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(self.store.len());
        for p in self.store.iter() {
            tensors.push(TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec(), offset });
            offset += 4 * p.tensor.numel() as u64;
        }
        let optimizer = self.adam.as_ref().map(|a| {
            let mut m_offsets = Vec::with_capacity(a.m.len());
            for m in &a.m {
                m_offsets.push(offset);
                offset += 4 * m.len() as u64;
            }
            let mut v_offsets = Vec::with_capacity(a.v.len());
            for v in &a.v {
                v_offsets.push(offset);
                offset += 4 * v.len() as u64;
            }
            OptimizerEntry { t: a.t, m_offsets, v_offsets }
        });
        let loss_weights = self
            .model
            .loss_weights
            .iter()
            .map(|(t, &id)| (t.key().to_string(), self.store.get(id).tensor.data()[0]))
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            seed: self.config.train.seed,
            step: self.step,
            train_view: self.train_view,
            loss_weights,
            tensors,
            optimizer,
            blob_bytes: offset,
        }
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |v: &[f32]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for p in self.store.iter() {
            put(p.tensor.data());
        }
        if let Some(a) = &self.adam {
            a.m.iter().for_each(|m| put(m));
            a.v.iter().for_each(|v| put(v));
        }
        out
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| CliError::io(format!("cannot write {}", p.display()), e))
        };
        write(BLOB_FILE, &self.blob())?;
        write(MANIFEST_FILE, manifest.as_bytes())
    }

    /// Reads a checkpoint. The version and the shape table are checked
    /// against a freshly built model before the blob is read.
    pub fn load(dir: &Path) -> CliResult<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| CliError::io(format!("cannot read {}", mpath.display()), e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != FORMAT_VERSION {
            return Err(CliError::Version { found, expected: FORMAT_VERSION });
        }
        let manifest: Manifest = serde_json::from_value(raw)?;
        let mut ck = Self::init(manifest.config.clone())?;
        ck.step = manifest.step;
        ck.train_view = manifest.train_view;
        check_table(&manifest, &ck.store)?;

        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| CliError::io(format!("cannot read {}", bpath.display()), e))?;
        if (blob.len() as u64) < manifest.blob_bytes {
            return Err(CliError::Truncated(format!(
                "{} holds {} bytes, manifest expects {}",
                bpath.display(),
                blob.len(),
                manifest.blob_bytes
            )));
        }
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(CliError::Shape(format!(
                "{} holds {} bytes, manifest expects {}",
                bpath.display(),
                blob.len(),
                manifest.blob_bytes
            )));
        }
        let read = |offset: u64, n: usize| -> Vec<f32> {
            let s = offset as usize;
            blob[s..s + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
        };
        let mut values = Vec::with_capacity(ck.store.len());
        for (entry, p) in manifest.tensors.iter().zip(ck.store.iter()) {
            values.push(read(entry.offset, p.tensor.numel()));
        }
        for (p, v) in ck.store.iter_mut().zip(values) {
            p.tensor.data_mut().copy_from_slice(&v);
        }
        if let Some(opt) = &manifest.optimizer {
            let mut adam = AdamState::new(&ck.store);
            adam.t = opt.t;
            for (k, p) in ck.store.iter().enumerate() {
                adam.m[k] = read(opt.m_offsets[k], p.tensor.numel());
                adam.v[k] = read(opt.v_offsets[k], p.tensor.numel());
            }
            ck.adam = Some(adam);
        }
        Ok(ck)
    }
}

/// Validates names, shapes and offsets of the manifest against `store`.
fn check_table(m: &Manifest, store: &ParamStore<f32>) -> CliResult<()> {
    if m.tensors.len() != store.len() {
        return Err(CliError::Shape(format!(
            "manifest lists {} tensors, the configured model has {}",
            m.tensors.len(),
            store.len()
        )));
    }
    let mut spans = Vec::new();
    for (e, p) in m.tensors.iter().zip(store.iter()) {
        if e.name != p.name || e.shape != p.tensor.shape() {
            return Err(CliError::Shape(format!(
                "tensor {} {:?} does not match model parameter {} {:?}",
                e.name,
                e.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        spans.push((e.offset, 4 * p.tensor.numel() as u64));
    }
    if let Some(opt) = &m.optimizer {
        if opt.m_offsets.len() != store.len() || opt.v_offsets.len() != store.len() {
            return Err(CliError::Shape("optimizer table does not match the parameter table".into()));
        }
        for (k, p) in store.iter().enumerate() {
            spans.push((opt.m_offsets[k], 4 * p.tensor.numel() as u64));
            spans.push((opt.v_offsets[k], 4 * p.tensor.numel() as u64));
        }
    }
    spans.sort_unstable();
    let mut end = 0;
    for (off, len) in spans {
        if off < end {
            return Err(CliError::Shape(format!("overlapping tensors at byte offset {off}")));
        }
        end = off + len;
    }
    if end != m.blob_bytes {
        return Err(CliError::Shape(format!(
            "tensor table covers {end} bytes but blob_bytes is {}",
            m.blob_bytes
        )));
    }
    Ok(())
}
