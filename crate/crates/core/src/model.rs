//! The recursive encoder: `N` layer applications over `K` shared blocks, with
//! optional conditional FFNs at the last application of selected groups.
//!
//! Layer `i` (1-based) uses group `⌈i/G⌉`, `G = N/K`. Groups are 1-based in
//! configs and tensor names (`groups.3.attn.wq`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::conditional::{
    check_lora_rank, moa_bottleneck, moa_tape, mol_tape, topk_indices, MoaLayer, MolLayer, RoutingRecord,
};
use crate::error::{shape_str, Error, Result};
use crate::merging::MergedAdapter;
use crate::nn::{
    attention_sublayer_tape, ffn_tape, layer_norm_tape, AttentionParams, FfnDelta, FfnParams, LayerNormParams,
    RopeConfig, SeqLayout, SharedBlockParams, DEFAULT_LN_EPS,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalKind {
    #[default]
    Mol,
    Moa,
}

/// Which teacher layer(s) seed a shared group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMapping {
    #[default]
    First,
    Middle,
    Average,
}

fn default_rope_base() -> f64 {
    10000.0
}
fn default_true() -> bool {
    true
}
fn default_experts() -> usize {
    8
}
fn default_top_k() -> usize {
    2
}
fn default_rank() -> usize {
    8
}
fn default_alpha() -> f64 {
    16.0
}
fn default_ln_eps() -> f64 {
    DEFAULT_LN_EPS
}
fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_groups: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_true")]
    pub geglu: bool,
    /// 1-based groups whose last layer application is conditional.
    #[serde(default)]
    pub mol_groups: Vec<usize>,
    #[serde(default)]
    pub conditional: ConditionalKind,
    #[serde(default = "default_experts")]
    pub n_experts: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_alpha")]
    pub lora_alpha: f64,
    /// Carried for published geometries; not used by the computation.
    #[serde(default)]
    pub expert_dim: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub teacher_mapping: TeacherMapping,
}

/// Published variant geometries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Medium,
    Base,
    Large,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Tiny, Variant::Medium, Variant::Base, Variant::Large];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Medium => "medium",
            Variant::Base => "base",
            Variant::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s.to_ascii_lowercase())
    }

    /// Published total size in millions, for reporting only.
    pub fn published_params_m(self) -> f64 {
        match self {
            Variant::Tiny => 50.0,
            Variant::Medium => 55.0,
            Variant::Base => 75.0,
            Variant::Large => 120.0,
        }
    }

    pub fn config(self) -> ModelConfig {
        let (n, k, mol, d, f, e, top_k): (usize, usize, Vec<usize>, usize, usize, usize, usize) = match self {
            Variant::Tiny => (14, 7, vec![6, 7], 768, 1152, 4, 1),
            Variant::Medium => (12, 3, vec![3], 1024, 2624, 8, 2),
            Variant::Base => (16, 4, vec![3, 4], 1024, 2624, 8, 2),
            Variant::Large => (24, 6, vec![3, 4, 5, 6], 1024, 2624, 8, 2),
        };
        ModelConfig {
            n_layers: n,
            n_groups: k,
            d_model: d,
            d_ff: f,
            // 64-dim heads.
            n_heads: d / 64,
            vocab_size: 50368,
            max_seq: 8192,
            rope_base: default_rope_base(),
            geglu: true,
            mol_groups: mol,
            conditional: ConditionalKind::Mol,
            n_experts: e,
            top_k,
            lora_rank: default_rank(),
            lora_alpha: default_alpha(),
            expert_dim: Some(if self == Variant::Tiny { 2624 } else { 4096 }),
            ln_eps: DEFAULT_LN_EPS,
            init_std: default_init_std(),
            teacher_mapping: TeacherMapping::First,
        }
    }
}

impl ModelConfig {
    /// A small dense config, convenient for tests and examples.
    pub fn toy(n_layers: usize, n_groups: usize, d_model: usize, vocab_size: usize) -> Self {
        ModelConfig {
            n_layers,
            n_groups,
            d_model,
            d_ff: 2 * d_model,
            n_heads: (d_model / 16).max(1),
            vocab_size,
            max_seq: 128,
            rope_base: default_rope_base(),
            geglu: true,
            mol_groups: Vec::new(),
            conditional: ConditionalKind::Mol,
            n_experts: 4,
            top_k: 2,
            lora_rank: (d_model / 8).max(1),
            lora_alpha: default_alpha(),
            expert_dim: None,
            ln_eps: DEFAULT_LN_EPS,
            init_std: default_init_std(),
            teacher_mapping: TeacherMapping::First,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_groups == 0 {
            return cfg("n_layers and n_groups must be >= 1".into());
        }
        if self.n_layers % self.n_groups != 0 {
            return cfg(format!(
                "n_layers ({}) must be divisible by n_groups ({})",
                self.n_layers, self.n_groups
            ));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return cfg("d_model, d_ff and n_heads must be >= 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return cfg(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        RopeConfig::new(self.rope_base, self.d_model / self.n_heads, self.max_seq)?;
        if self.vocab_size < 4 {
            return cfg(format!("vocab_size must be >= 4, got {}", self.vocab_size));
        }
        if self.max_seq == 0 {
            return cfg("max_seq must be >= 1".into());
        }
        if !(self.ln_eps > 0.0) {
            return cfg(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        if !(self.init_std >= 0.0) {
            return cfg(format!("init_std must be >= 0, got {}", self.init_std));
        }
        let mut seen = vec![false; self.n_groups + 1];
        for &g in &self.mol_groups {
            if g == 0 || g > self.n_groups {
                return cfg(format!(
                    "mol_groups entry {g} out of range 1..={}",
                    self.n_groups
                ));
            }
            if seen[g] {
                return cfg(format!("mol_groups lists group {g} twice"));
            }
            seen[g] = true;
        }
        if !self.mol_groups.is_empty() {
            if self.n_experts == 0 || self.top_k == 0 || self.top_k > self.n_experts {
                return cfg(format!(
                    "top_k ({}) must be in 1..=n_experts ({})",
                    self.top_k, self.n_experts
                ));
            }
            check_lora_rank(self.d_model, self.d_ff, self.lora_rank)?;
            if !(self.lora_alpha > 0.0) {
                return cfg(format!("lora_alpha must be > 0, got {}", self.lora_alpha));
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.n_layers / self.n_groups
    }

    /// Group (1-based) used by layer `layer` (1-based).
    pub fn layer_group(&self, layer: usize) -> usize {
        (layer - 1) / self.group_size() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.rope_base, self.head_dim(), self.max_seq)
    }

    pub fn is_conditional_group(&self, group: usize) -> bool {
        self.mol_groups.contains(&group)
    }

    /// True when layer `layer` routes through its group's conditional FFN.
    pub fn is_conditional_layer(&self, layer: usize) -> bool {
        layer % self.group_size() == 0 && self.is_conditional_group(self.layer_group(layer))
    }

    pub fn moa_bottleneck(&self) -> usize {
        moa_bottleneck(self.d_model, self.d_ff, self.lora_rank)
    }

    pub fn block_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        let ffn = if self.geglu { 3 * d * f } else { 2 * d * f };
        4 * d + 4 * d * d + ffn
    }

    pub fn conditional_params(&self) -> usize {
        let (d, f, r, e) = (self.d_model, self.d_ff, self.lora_rank, self.n_experts);
        let per_expert = match self.conditional {
            ConditionalKind::Mol => 2 * r * (d + f),
            ConditionalKind::Moa => 2 * d * self.moa_bottleneck(),
        };
        e * per_expert + d * e
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    pub blocks: usize,
    pub conditional: usize,
    pub final_norm: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub n_layers: usize,
    pub n_groups: usize,
    pub group_size: usize,
    pub d_model: usize,
    pub unique_params: usize,
    pub full_equivalent_params: usize,
    pub ratio: f64,
    pub unique_block_params: usize,
    pub full_block_params: usize,
    pub block_ratio: f64,
    /// `12·K·d²`
    pub approx_unique_blocks: usize,
    /// `12·N·d²`
    pub approx_full_blocks: usize,
    pub breakdown: ParamBreakdown,
}

/// Exact counts from the config alone (no allocation, so published sizes are cheap).
pub fn count_params(cfg: &ModelConfig) -> ParamReport {
    let d = cfg.d_model;
    let embedding = cfg.vocab_size * d;
    let block = cfg.block_params();
    let unique_block = cfg.n_groups * block;
    let full_block = cfg.n_layers * block;
    let conditional = cfg.mol_groups.len() * cfg.conditional_params();
    let final_norm = 2 * d;
    let unique = embedding + unique_block + conditional + final_norm;
    let full = embedding + full_block + final_norm;
    ParamReport {
        n_layers: cfg.n_layers,
        n_groups: cfg.n_groups,
        group_size: cfg.group_size(),
        d_model: d,
        unique_params: unique,
        full_equivalent_params: full,
        ratio: unique as f64 / full as f64,
        unique_block_params: unique_block,
        full_block_params: full_block,
        block_ratio: unique_block as f64 / full_block as f64,
        approx_unique_blocks: 12 * cfg.n_groups * d * d,
        approx_full_blocks: 12 * cfg.n_layers * d * d,
        breakdown: ParamBreakdown {
            embedding,
            blocks: unique_block,
            conditional,
            final_norm,
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GroupConditional {
    Mol(MolLayer),
    Moa(MoaLayer),
    /// A MoL layer collapsed into one static adapter: no router.
    Merged(MergedAdapter),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecursiveEncoder {
    pub config: ModelConfig,
    /// `[vocab, d]`, also the (tied) output projection.
    pub embedding: Tensor,
    pub groups: Vec<SharedBlockParams>,
    /// Indexed by group - 1.
    pub conditional: Vec<Option<GroupConditional>>,
    pub final_norm: LayerNormParams,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<RecursiveEncoder> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f, std) = (cfg.d_model, cfg.d_ff, cfg.init_std);
    let embedding = Tensor::randn(&[cfg.vocab_size, d], std, &mut rng).with_grad(true);
    let mut groups = Vec::with_capacity(cfg.n_groups);
    for _ in 0..cfg.n_groups {
        groups.push(SharedBlockParams {
            attn_norm: LayerNormParams::new(d, cfg.ln_eps)?,
            attn: AttentionParams::init(d, cfg.n_heads, std, &mut rng)?,
            ffn_norm: LayerNormParams::new(d, cfg.ln_eps)?,
            ffn: FfnParams::init(d, f, cfg.geglu, std, &mut rng),
        });
    }
    let mut conditional = Vec::with_capacity(cfg.n_groups);
    for g in 1..=cfg.n_groups {
        conditional.push(if !cfg.is_conditional_group(g) {
            None
        } else {
            Some(match cfg.conditional {
                ConditionalKind::Mol => GroupConditional::Mol(MolLayer::init(
                    d,
                    f,
                    cfg.n_experts,
                    cfg.top_k,
                    cfg.lora_rank,
                    cfg.lora_alpha,
                    &mut rng,
                )?),
                ConditionalKind::Moa => GroupConditional::Moa(MoaLayer::init(
                    d,
                    cfg.moa_bottleneck(),
                    cfg.n_experts,
                    cfg.top_k,
                    &mut rng,
                )?),
            })
        });
    }
    Ok(RecursiveEncoder {
        config: cfg.clone(),
        embedding,
        groups,
        conditional,
        final_norm: LayerNormParams::new(d, cfg.ln_eps)?,
    })
}

/// How conditional layers are evaluated.
#[derive(Clone, Copy, Debug)]
pub enum ForwardMode<'a> {
    /// Top-k routing through the experts.
    Routed,
    /// MoL groups use the fixed convex combination `weights[g-1]` of their
    /// experts instead of routing. With `router_stats`, router probabilities
    /// are still computed (but not used) so routing statistics can be gathered.
    Merged {
        weights: &'a [Option<Vec<f64>>],
        router_stats: bool,
    },
}

pub struct ForwardOutput {
    /// `[rows, vocab]`
    pub logits: Var,
    pub routing: Vec<RoutingRecord>,
}

impl RecursiveEncoder {
    pub fn rope(&self) -> Result<RopeConfig> {
        self.config.rope()
    }

    /// Forward over packed rows described by `layout`.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        ids: &[usize],
        layout: &SeqLayout,
        mode: ForwardMode<'_>,
    ) -> Result<ForwardOutput> {
        if ids.len() != layout.rows() {
            return Err(Error::Dimension(format!(
                "{} token ids for a layout of {} rows",
                ids.len(),
                layout.rows()
            )));
        }
        let rope = self.rope()?;
        let emb = tape.param(&self.embedding);
        let mut h = tape.embedding(emb, ids)?;
        let mut routing = Vec::new();
        for layer in 1..=self.config.n_layers {
            let g = self.config.layer_group(layer);
            let block = &self.groups[g - 1];
            let h_att = attention_sublayer_tape(tape, h, block, &rope, layout)?;
            let x = layer_norm_tape(tape, h_att, &block.ffn_norm)?;
            let f = match (&self.conditional[g - 1], self.config.is_conditional_layer(layer)) {
                (Some(c), true) => {
                    let (f, rec) = self.conditional_ffn(tape, x, g, c, mode)?;
                    routing.extend(rec);
                    f
                }
                _ => ffn_tape(tape, x, &block.ffn, None)?,
            };
            h = tape.add(h_att, f)?;
        }
        let hn = layer_norm_tape(tape, h, &self.final_norm)?;
        let logits = tape.matmul_nt(hn, emb)?;
        Ok(ForwardOutput { logits, routing })
    }

    fn conditional_ffn(
        &self,
        tape: &mut Tape,
        x: Var,
        g: usize,
        c: &GroupConditional,
        mode: ForwardMode<'_>,
    ) -> Result<(Var, Option<RoutingRecord>)> {
        let shared = &self.groups[g - 1].ffn;
        match (c, mode) {
            (GroupConditional::Mol(layer), ForwardMode::Routed) => {
                let (y, rec) = mol_tape(tape, x, shared, layer, g)?;
                Ok((y, Some(rec)))
            }
            (GroupConditional::Mol(layer), ForwardMode::Merged { weights, router_stats }) => {
                let w = weights
                    .get(g - 1)
                    .and_then(|w| w.as_ref())
                    .ok_or_else(|| Error::Merge(format!("no merging weights for group {g}")))?;
                if w.len() != layer.n_experts() {
                    return Err(Error::Merge(format!(
                        "group {g}: {} merging weights for {} experts",
                        w.len(),
                        layer.n_experts()
                    )));
                }
                let mut delta = FfnDelta::default();
                for (e, &wj) in layer.experts.iter().zip(w) {
                    let d = e.weighted_delta(wj);
                    delta.down.extend(d.down);
                    delta.up.extend(d.up);
                }
                let y = ffn_tape(tape, x, shared, Some(&delta))?;
                let rec = if router_stats {
                    let wr = tape.param(&layer.router.weight);
                    let logits = tape.matmul(x, wr)?;
                    let probs = tape.softmax(logits)?;
                    // The merged output ignores the router, so a trainable
                    // router only sees the load-balance term on these picks.
                    let selections = if layer.router.frozen {
                        Vec::new()
                    } else {
                        let pv = tape.value(probs);
                        (0..pv.rows())
                            .map(|t| topk_indices(pv.row(t), layer.router.top_k))
                            .collect()
                    };
                    Some(RoutingRecord {
                        group: g,
                        probs,
                        selections,
                    })
                } else {
                    None
                };
                Ok((y, rec))
            }
            (GroupConditional::Moa(layer), ForwardMode::Routed) => {
                let (y, rec) = moa_tape(tape, x, shared, layer, g)?;
                Ok((y, Some(rec)))
            }
            (GroupConditional::Moa(_), ForwardMode::Merged { .. }) => Err(Error::Merge(format!(
                "group {g} is a mixture of adapters; only MoL layers can be merged"
            ))),
            (GroupConditional::Merged(adapter), _) => {
                let y = ffn_tape(tape, x, shared, Some(&adapter.delta()))?;
                Ok((y, None))
            }
        }
    }

    /// Logits `[seq, vocab]` for a single unpadded sequence.
    pub fn forward_mlm(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        let mut tape = Tape::new();
        let layout = SeqLayout::dense(1, ids.len());
        let out = self.forward_tape(&mut tape, ids, &layout, ForwardMode::Routed)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn has_mol(&self) -> bool {
        self.conditional.iter().any(|c| matches!(c, Some(GroupConditional::Mol(_))))
    }

    pub fn mol_layer(&self, group: usize) -> Option<&MolLayer> {
        match self.conditional.get(group.wrapping_sub(1)) {
            Some(Some(GroupConditional::Mol(l))) => Some(l),
            _ => None,
        }
    }

    pub fn mol_layer_mut(&mut self, group: usize) -> Option<&mut MolLayer> {
        match self.conditional.get_mut(group.wrapping_sub(1)) {
            Some(Some(GroupConditional::Mol(l))) => Some(l),
            _ => None,
        }
    }

    /// Every tensor with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, block) in self.groups.iter().enumerate() {
            let g = i + 1;
            out.extend(block.named_params(&format!("groups.{g}")));
            match &self.conditional[i] {
                None => {}
                Some(GroupConditional::Mol(l)) => {
                    out.push((format!("groups.{g}.mol.router"), &l.router.weight));
                    for (e, ex) in l.experts.iter().enumerate() {
                        for (n, t) in ex.tensors() {
                            out.push((format!("groups.{g}.mol.experts.{e}.{n}"), t));
                        }
                    }
                }
                Some(GroupConditional::Moa(l)) => {
                    out.push((format!("groups.{g}.moa.router"), &l.router.weight));
                    for (e, ad) in l.adapters.iter().enumerate() {
                        out.push((format!("groups.{g}.moa.adapters.{e}.down"), &ad.down));
                        out.push((format!("groups.{g}.moa.adapters.{e}.up"), &ad.up));
                    }
                }
                Some(GroupConditional::Merged(m)) => {
                    for (n, t) in m.tensors() {
                        out.push((format!("groups.{g}.merged.{n}"), t));
                    }
                }
            }
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out
    }

    /// Same names and order as [`named_params`](Self::named_params).
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("embedding".to_string(), &mut self.embedding)];
        for (i, (block, cond)) in self.groups.iter_mut().zip(self.conditional.iter_mut()).enumerate() {
            let g = i + 1;
            out.extend(block.named_params_mut(&format!("groups.{g}")));
            match cond {
                None => {}
                Some(GroupConditional::Mol(l)) => {
                    out.push((format!("groups.{g}.mol.router"), &mut l.router.weight));
                    for (e, ex) in l.experts.iter_mut().enumerate() {
                        for (n, t) in ex.tensors_mut() {
                            out.push((format!("groups.{g}.mol.experts.{e}.{n}"), t));
                        }
                    }
                }
                Some(GroupConditional::Moa(l)) => {
                    out.push((format!("groups.{g}.moa.router"), &mut l.router.weight));
                    for (e, ad) in l.adapters.iter_mut().enumerate() {
                        out.push((format!("groups.{g}.moa.adapters.{e}.down"), &mut ad.down));
                        out.push((format!("groups.{g}.moa.adapters.{e}.up"), &mut ad.up));
                    }
                }
                Some(GroupConditional::Merged(m)) => {
                    for (n, t) in m.tensors_mut() {
                        out.push((format!("groups.{g}.merged.{n}"), t));
                    }
                }
            }
        }
        out.push(("final_norm.gain".into(), &mut self.final_norm.gain));
        out.push(("final_norm.bias".into(), &mut self.final_norm.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Overwrite this model's shared blocks, embedding and final norm from a
    /// fully parameterised teacher (`n_groups == n_layers`). Conditional
    /// layers are reset to a zero delta and a uniform router.
    pub fn init_from_teacher(&mut self, teacher: &RecursiveEncoder) -> Result<()> {
        let (cfg, tcfg) = (&self.config, &teacher.config);
        if tcfg.n_groups != tcfg.n_layers {
            return Err(Error::Init(format!(
                "teacher must be fully parameterised, got {} groups for {} layers",
                tcfg.n_groups, tcfg.n_layers
            )));
        }
        if tcfg.n_layers != cfg.n_layers {
            return Err(Error::Init(format!(
                "teacher depth {} differs from student depth {}",
                tcfg.n_layers, cfg.n_layers
            )));
        }
        let g_size = cfg.group_size();
        let sources = |g: usize| -> Vec<usize> {
            let first = (g - 1) * g_size;
            match cfg.teacher_mapping {
                TeacherMapping::First => vec![first],
                TeacherMapping::Middle => vec![first + (g_size - 1) / 2],
                TeacherMapping::Average => (first..first + g_size).collect(),
            }
        };

        let mut mismatched = Vec::new();
        let check = |name: &str, s: &Tensor, t: &Tensor, out: &mut Vec<String>| {
            if s.shape() != t.shape() {
                out.push(format!(
                    "{name}: student {} vs teacher {}",
                    shape_str(s.shape()),
                    shape_str(t.shape())
                ));
            }
        };
        check("embedding", &self.embedding, &teacher.embedding, &mut mismatched);
        check("final_norm.gain", &self.final_norm.gain, &teacher.final_norm.gain, &mut mismatched);
        for g in 1..=cfg.n_groups {
            let student = self.groups[g - 1].named_params(&format!("groups.{g}"));
            let src = sources(g)[0];
            let tp = teacher.groups[src].named_params("");
            if student.len() != tp.len() {
                mismatched.push(format!(
                    "groups.{g}: {} tensors vs teacher layer {}: {} tensors (geglu differs)",
                    student.len(),
                    src + 1,
                    tp.len()
                ));
                continue;
            }
            for ((n, s), (_, t)) in student.iter().zip(&tp) {
                check(n, s, t, &mut mismatched);
            }
        }
        if !mismatched.is_empty() {
            return Err(Error::Init(format!("mismatched tensors: {}", mismatched.join("; "))));
        }
        if tcfg.n_heads != cfg.n_heads || tcfg.rope_base != cfg.rope_base {
            return Err(Error::Init("teacher attention geometry (heads, rope base) differs".into()));
        }

        copy_into(&mut self.embedding, &teacher.embedding);
        copy_into(&mut self.final_norm.gain, &teacher.final_norm.gain);
        copy_into(&mut self.final_norm.bias, &teacher.final_norm.bias);
        for g in 1..=cfg.n_groups {
            let src = sources(g);
            let teacher_blocks: Vec<Vec<(String, &Tensor)>> =
                src.iter().map(|&l| teacher.groups[l].named_params("")).collect();
            let mut student = self.groups[g - 1].named_params_mut("");
            for (k, (_, s)) in student.iter_mut().enumerate() {
                if teacher_blocks.len() == 1 {
                    copy_into(s, teacher_blocks[0][k].1);
                } else {
                    let n = teacher_blocks.len() as f64;
                    let data = s.data_mut();
                    data.iter_mut().for_each(|v| *v = 0.0);
                    for tb in &teacher_blocks {
                        for (v, t) in data.iter_mut().zip(tb[k].1.data()) {
                            *v += t;
                        }
                    }
                    data.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        for c in self.conditional.iter_mut().flatten() {
            match c {
                GroupConditional::Mol(l) => {
                    l.router.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    for e in &mut l.experts {
                        e.b_down.data_mut().iter_mut().for_each(|v| *v = 0.0);
                        e.b_up.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                GroupConditional::Moa(l) => {
                    l.router.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    for a in &mut l.adapters {
                        a.up.data_mut().iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                GroupConditional::Merged(_) => {}
            }
        }
        Ok(())
    }
}

fn copy_into(dst: &mut Tensor, src: &Tensor) {
    dst.data_mut().copy_from_slice(src.data());
}

/// The dense teacher matching a student config: one group per layer, no
/// conditional layers.
pub fn teacher_config(student: &ModelConfig) -> ModelConfig {
    ModelConfig {
        n_groups: student.n_layers,
        mol_groups: Vec::new(),
        ..student.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::toy(4, 2, 32, 40)
    }

    #[test]
    fn layers_map_to_groups() {
        let c = small();
        let groups: Vec<usize> = (1..=4).map(|l| c.layer_group(l)).collect();
        assert_eq!(groups, vec![1, 1, 2, 2]);
    }

    #[test]
    fn mol_replaces_only_the_last_application() {
        let c = ModelConfig {
            mol_groups: vec![2],
            ..small()
        };
        let cond: Vec<bool> = (1..=4).map(|l| c.is_conditional_layer(l)).collect();
        assert_eq!(cond, vec![false, false, false, true]);
    }

    #[test]
    fn config_errors() {
        let bad = ModelConfig { n_layers: 5, ..small() };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = ModelConfig {
            mol_groups: vec![3],
            ..small()
        };
        assert!(bad.validate().unwrap_err().is_config());
        let bad = ModelConfig {
            mol_groups: vec![1],
            lora_rank: 9,
            ..small()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let mut v = serde_json::to_value(small()).unwrap();
        v["n_layer"] = 3.into();
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let c = ModelConfig {
            mol_groups: vec![1, 2],
            ..small()
        };
        assert_eq!(build_model(&c, 7).unwrap(), build_model(&c, 7).unwrap());
        assert_ne!(build_model(&c, 7).unwrap(), build_model(&c, 8).unwrap());
    }

    #[test]
    fn analytic_count_matches_allocated_tensors() {
        for (kind, geglu) in [(ConditionalKind::Mol, true), (ConditionalKind::Moa, false)] {
            let c = ModelConfig {
                mol_groups: vec![2],
                conditional: kind,
                geglu,
                ..small()
            };
            let m = build_model(&c, 0).unwrap();
            assert_eq!(count_params(&c).unique_params, m.param_count());
        }
    }

    #[test]
    fn approximate_formula_example() {
        let c = ModelConfig {
            d_ff: 4 * 768,
            n_heads: 12,
            geglu: false,
            ..ModelConfig::toy(12, 12, 768, 100)
        };
        assert_eq!(count_params(&c).approx_full_blocks, 84_934_656);
    }

    #[test]
    fn block_ratio_is_one_over_g() {
        let r = count_params(&ModelConfig::toy(12, 3, 32, 40));
        assert_eq!(r.block_ratio, 0.25);
        assert_eq!(count_params(&ModelConfig::toy(4, 4, 32, 40)).ratio, 1.0);
    }

    #[test]
    fn logits_shape_and_bad_ids() {
        let m = build_model(&small(), 0).unwrap();
        assert_eq!(m.forward_mlm(&[3, 4, 5]).unwrap().shape(), &[3, 40]);
        assert!(matches!(m.forward_mlm(&[3, 40]), Err(Error::Input(_))));
    }

    #[test]
    fn names_are_unique_and_aligned() {
        let c = ModelConfig {
            mol_groups: vec![1],
            ..small()
        };
        let mut m = build_model(&c, 0).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut_names: Vec<String> = m.named_params_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn teacher_depth_mismatch_is_an_init_error() {
        let mut student = build_model(&small(), 0).unwrap();
        let teacher = build_model(&ModelConfig::toy(2, 2, 32, 40), 1).unwrap();
        assert!(matches!(student.init_from_teacher(&teacher), Err(Error::Init(_))));
        let teacher = build_model(&ModelConfig::toy(4, 4, 16, 40), 1).unwrap();
        let err = student.init_from_teacher(&teacher).unwrap_err().to_string();
        assert!(err.contains("groups.1.attn.wq"), "{err}");
    }

    #[test]
    fn variants_validate() {
        for v in Variant::ALL {
            v.config().validate().unwrap();
        }
    }
}
