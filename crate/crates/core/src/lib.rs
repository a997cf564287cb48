//! Recursive (parameter-shared) transformer encoders with Mixture-of-LoRAs
//! conditional layers, trained from scratch on a small reverse-mode autograd.
//!
//! Module map:
//! - [`tensor`], [`autograd`]: dense `f64` tensors and the gradient tape.
//! - [`nn`]: layer norm, rotary attention, (Ge)GLU FFN.
//! - [`conditional`]: routers, LoRA experts, MoL and MoA layers.
//! - [`model`]: the recursive encoder, parameter accounting, teacher init.
//! - [`training`]: masking, losses, AdamW, the training loop and evaluation.
//! - [`merging`]: collapsing MoL experts into one adapter.
//! - [`data`]: tokenizer, vocabularies and synthetic corpora.
//! - [`checkpoint`]: the on-disk tensor format.
//! - [`gradcheck`]: finite-difference verification of gradients.

pub mod autograd;
pub mod checkpoint;
pub mod conditional;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod merging;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use autograd::{Tape, Var};
pub use checkpoint::{load_model, save_model, Checkpoint};
pub use conditional::{LoraExpert, MoaLayer, MolLayer, Router};
pub use data::{SyntheticSpec, TaskKind, Vocab};
pub use error::{Error, Result};
pub use merging::{MergeConfig, MergeState, MergeStrategy, MergedAdapter};
pub use model::{build_model, count_params, ModelConfig, ParamReport, RecursiveEncoder, Variant};
pub use nn::{FfnParams, RopeConfig, SharedBlockParams};
pub use tensor::Tensor;
pub use training::{DistillConfig, MaskingConfig, OptimConfig, TrainConfig, Trainer};
