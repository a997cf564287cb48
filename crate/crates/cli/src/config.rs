//! Run configuration files: JSON, every section validated, unknown keys rejected.

use std::path::{Path, PathBuf};

use mol_core::merging::MergeConfig;
use mol_core::training::{DistillConfig, MaskingConfig, OptimConfig, TrainConfig};
use mol_core::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

fn d_temperature() -> f64 {
    DistillConfig::default().temperature
}
fn d_lambda() -> f64 {
    DistillConfig::default().lambda
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Checkpoint of a fully parameterised teacher of the same depth. The
    /// student's shared blocks are initialised from it before training.
    pub teacher: Option<PathBuf>,
}

impl DistillSection {
    pub fn config(&self) -> DistillConfig {
        DistillConfig {
            temperature: self.temperature,
            lambda: self.lambda,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Training corpus (task data for finetune/merge), one document per line.
    pub phase1: Option<PathBuf>,
    /// Optional second-phase corpus, used after `train.phase1_steps`.
    pub phase2: Option<PathBuf>,
    /// Vocabulary JSON; built from `phase1` when absent.
    pub vocab: Option<PathBuf>,
    /// Held-out corpus for end-of-run evaluation.
    pub eval: Option<PathBuf>,
    /// Encoded sequence length; defaults to `model.max_seq`.
    pub seq_len: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Required for pretraining; finetune and merge take it from `init_checkpoint`.
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub masking: MaskingConfig,
    pub distill: Option<DistillSection>,
    #[serde(default)]
    pub merge: MergeConfig,
    #[serde(default)]
    pub data: DataSection,
    pub init_checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        // Relative paths are relative to the config file.
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data.phase1);
        fix(&mut self.data.phase2);
        fix(&mut self.data.vocab);
        fix(&mut self.data.eval);
        fix(&mut self.init_checkpoint);
        fix(&mut self.output_dir);
        if let Some(d) = &mut self.distill {
            fix(&mut d.teacher);
        }
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        flag.or(self.seed)
            .ok_or_else(|| Error::Config("seed: missing (set it in the config or pass --seed)".into()))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::Config("output_dir: missing".into()))
    }

    /// Training settings, falling back to the fine-tuning learning rate when
    /// the section is absent and `finetune` is set.
    pub fn train(&self, finetune: bool) -> TrainConfig {
        self.train.clone().unwrap_or_else(|| TrainConfig {
            optim: OptimConfig {
                lr: if finetune {
                    OptimConfig::FINETUNE_LR
                } else {
                    OptimConfig::PRETRAIN_LR
                },
                ..OptimConfig::default()
            },
            ..TrainConfig::default()
        })
    }
}

/// `path` must name an existing file; errors name the config field.
pub fn existing(field: &str, path: Option<&Path>) -> Result<PathBuf> {
    let p = path.ok_or_else(|| Error::Config(format!("{field}: missing")))?;
    if !p.is_file() {
        return Err(Error::Config(format!("{field}: file not found: {}", p.display())));
    }
    Ok(p.to_path_buf())
}

pub fn existing_opt(field: &str, path: Option<&Path>) -> Result<Option<PathBuf>> {
    path.map(|p| existing(field, Some(p))).transpose()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_train_section_uses_phase_learning_rate() {
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg.train(true).optim.lr, OptimConfig::FINETUNE_LR);
        assert_eq!(cfg.train(false).optim.lr, OptimConfig::PRETRAIN_LR);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::TempDir::new().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"data": {"phase1": "c.txt", "eval": "/abs/e.txt"}, "output_dir": "out"}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.data.phase1.unwrap(), dir.path().join("c.txt"));
        assert_eq!(cfg.data.eval.unwrap(), PathBuf::from("/abs/e.txt"));
        assert_eq!(cfg.output_dir.unwrap(), dir.path().join("out"));
    }

    #[test]
    fn unknown_nested_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"merge": {"strategy": "ema", "decay": 0.5}}"#).unwrap_err();
        assert!(err.to_string().contains("decay"));
        let err = serde_json::from_str::<RunConfig>(r#"{"data": {"phase_1": "x"}}"#).unwrap_err();
        assert!(err.to_string().contains("phase_1"));
    }
}
