//! Named-tensor checkpoints.
//!
//! Layout: a UTF-8 JSON header, one `\0` byte, then each tensor's data as
//! little-endian `f64` in manifest order. Manifest offsets are byte offsets
//! into the payload (the part after `\0`). Values round-trip bit-exactly.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_str, Error, Result};
use crate::merging::{MergePlan, MergeState, MergeStrategy, MergedAdapter};
use crate::model::{build_model, GroupConditional, ModelConfig, RecursiveEncoder};
use crate::tensor::Tensor;
use crate::training::{MaskingConfig, OptimState, TrainConfig, Trainer};

pub const FORMAT: &str = "mol-checkpoint-v1";
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub step: usize,
    pub seed: u64,
    pub train: TrainConfig,
    #[serde(default)]
    pub merge: Option<(MergeStrategy, Vec<Option<MergeState>>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Groups whose MoL layer has been collapsed into a static adapter.
    #[serde(default)]
    pub merged_groups: Vec<usize>,
    #[serde(default)]
    pub frozen_routers: Vec<usize>,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &RecursiveEncoder) -> Self {
        let mut meta = CheckpointMeta::default();
        for (i, c) in model.conditional.iter().enumerate() {
            match c {
                Some(GroupConditional::Merged(_)) => meta.merged_groups.push(i + 1),
                Some(GroupConditional::Mol(l)) if l.router.frozen => meta.frozen_routers.push(i + 1),
                Some(GroupConditional::Moa(l)) if l.router.frozen => meta.frozen_routers.push(i + 1),
                _ => {}
            }
        }
        Checkpoint {
            config: model.config.clone(),
            meta,
            tensors: model
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn from_trainer(trainer: &Trainer) -> Result<Self> {
        let mut ck = Checkpoint::from_model(&trainer.model);
        let mut names: Vec<&String> = trainer.optim.m.keys().collect();
        names.sort();
        for n in &names {
            ck.tensors.push((format!("{M_PREFIX}{n}"), trainer.optim.m[*n].clone()));
        }
        for n in &names {
            let v = trainer
                .optim
                .v
                .get(*n)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer second moment missing for {n}")))?;
            ck.tensors.push((format!("{V_PREFIX}{n}"), v.clone()));
        }
        ck.meta.training = Some(TrainingMeta {
            step: trainer.optim.step,
            seed: trainer.seed,
            train: trainer.train.clone(),
            merge: trainer.merge.as_ref().map(|p| (p.strategy, p.states.clone())),
        });
        Ok(ck)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let manifest = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel() * 8;
                e
            })
            .collect();
        let header = Header {
            format: FORMAT.into(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: manifest,
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(0);
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported format {:?}, expected {FORMAT:?}",
                header.format
            )));
        }
        let payload = &bytes[split + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected = 0;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected {
                return Err(Error::Checkpoint(format!(
                    "{}: offset {} does not follow the previous tensor (expected {expected})",
                    e.name, e.offset
                )));
            }
            let end = e.offset + n * 8;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", e.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name, Tensor::new(e.shape, data)?));
            expected = end;
        }
        if expected != payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload has {} trailing bytes",
                payload.len() - expected
            )));
        }
        Ok(Checkpoint {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Rebuilds the model. Every model tensor must be present with the
    /// expected shape; optimizer entries are ignored.
    pub fn to_model(&self) -> Result<RecursiveEncoder> {
        let mut model = build_model(&self.config, 0)?;
        let (d, f) = (self.config.d_model, self.config.d_ff);
        let scale = self.config.lora_alpha / self.config.lora_rank as f64;
        for &g in &self.meta.merged_groups {
            let name = format!("groups.{g}.merged.a_down");
            let width = self
                .tensor(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?
                .last_dim();
            let slot = model
                .conditional
                .get_mut(g.wrapping_sub(1))
                .ok_or_else(|| Error::Checkpoint(format!("merged group {g} out of range")))?;
            *slot = Some(GroupConditional::Merged(MergedAdapter::zeros(d, f, width, scale)));
        }
        for &g in &self.meta.frozen_routers {
            match model.conditional.get_mut(g.wrapping_sub(1)) {
                Some(Some(GroupConditional::Mol(l))) => l.router.set_frozen(true),
                Some(Some(GroupConditional::Moa(l))) => l.router.set_frozen(true),
                _ => return Err(Error::Checkpoint(format!("frozen router listed for group {g}, which has none"))),
            }
        }
        let mut stored: HashMap<&str, &Tensor> = HashMap::new();
        for (n, t) in &self.tensors {
            if !n.starts_with(M_PREFIX) && !n.starts_with(V_PREFIX) {
                stored.insert(n.as_str(), t);
            }
        }
        let mut used = 0;
        for (name, t) in model.named_params_mut() {
            let src = stored
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {} but the config implies {}",
                    shape_str(src.shape()),
                    shape_str(t.shape())
                )));
            }
            t.data_mut().copy_from_slice(src.data());
            used += 1;
        }
        if used != stored.len() {
            let known: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&str> = stored.keys().filter(|n| !known.iter().any(|k| k == *n)).copied().collect();
            return Err(Error::Checkpoint(format!("unexpected tensors: {}", extra.join(", "))));
        }
        Ok(model)
    }

    /// Restores a trainer (model, optimizer moments, step, seed) saved by
    /// [`Checkpoint::from_trainer`]. A teacher, if any, must be re-attached.
    pub fn to_trainer(&self, masking: MaskingConfig) -> Result<Trainer> {
        let meta = self
            .meta
            .training
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
        let model = self.to_model()?;
        let mut optim = OptimState::new(meta.train.optim.clone(), meta.train.steps)?;
        optim.step = meta.step;
        for (n, t) in &self.tensors {
            if let Some(p) = n.strip_prefix(M_PREFIX) {
                optim.m.insert(p.to_string(), t.clone());
            } else if let Some(p) = n.strip_prefix(V_PREFIX) {
                optim.v.insert(p.to_string(), t.clone());
            }
        }
        let mut trainer = Trainer::new(model, meta.train.clone(), masking, meta.seed)?;
        trainer.optim = optim;
        if let Some((strategy, states)) = &meta.merge {
            trainer.merge = Some(MergePlan {
                strategy: *strategy,
                states: states.clone(),
            });
        }
        Ok(trainer)
    }

    /// Bytes taken by tensors whose name matches `pred`.
    pub fn payload_bytes(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors.iter().filter(|(n, _)| pred(n)).map(|(_, t)| t.numel() * 8).sum()
    }
}

pub fn save_model(model: &RecursiveEncoder, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).write(path)
}

pub fn load_model(path: &Path) -> Result<RecursiveEncoder> {
    Checkpoint::read(path)?.to_model()
}
