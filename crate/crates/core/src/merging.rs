//! Collapsing a MoL layer's experts into one static adapter.
//!
//! `Δ_merged = Σ_j w_j Δ_j` with `w` on the simplex. The merged adapter stays
//! factored: `A_cat = [A_1 … A_E]` and `B_cat = [w_1·B_1; …; w_E·B_E]`, so
//! `A_cat·B_cat = Σ_j w_j A_j B_j` at rank at most `E·r`.
//!
//! `w` is either frozen at `1/E` (uniform) or tracked as an exponential moving
//! average of batch routing statistics (ema).

use serde::{Deserialize, Serialize};

use crate::conditional::LoraExpert;
use crate::error::{shape_str, Error, Result};
use crate::model::{GroupConditional, RecursiveEncoder};
use crate::nn::{FfnDelta, LowRankTerm};
use crate::tensor::Tensor;
use crate::training::{train_loop, MaskingConfig, RunOutput, StepRecord, TrainConfig, Trainer};

/// A MoL layer after merging: one low-rank update per projection, no router.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedAdapter {
    /// `[d, E·r]`
    pub a_down: Tensor,
    /// `[E·r, f]`
    pub b_down: Tensor,
    /// `[f, E·r]`
    pub a_up: Tensor,
    /// `[E·r, d]`
    pub b_up: Tensor,
    /// `α/r` of the source experts.
    pub scale: f64,
}

impl MergedAdapter {
    pub fn delta(&self) -> FfnDelta<'_> {
        FfnDelta {
            down: vec![LowRankTerm {
                a: &self.a_down,
                b: &self.b_down,
                coef: self.scale,
            }],
            up: vec![LowRankTerm {
                a: &self.a_up,
                b: &self.b_up,
                coef: self.scale,
            }],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("a_down", &self.a_down),
            ("b_down", &self.b_down),
            ("a_up", &self.a_up),
            ("b_up", &self.b_up),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("a_down", &mut self.a_down),
            ("b_down", &mut self.b_down),
            ("a_up", &mut self.a_up),
            ("b_up", &mut self.b_up),
        ]
    }

    /// Placeholder with the right shapes, filled in when loading a checkpoint.
    pub fn zeros(d: usize, f: usize, width: usize, scale: f64) -> Self {
        MergedAdapter {
            a_down: Tensor::zeros(&[d, width]).with_grad(true),
            b_down: Tensor::zeros(&[width, f]).with_grad(true),
            a_up: Tensor::zeros(&[f, width]).with_grad(true),
            b_up: Tensor::zeros(&[width, d]).with_grad(true),
            scale,
        }
    }
}

fn hcat(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts[0].rows();
    let widths: Vec<usize> = parts.iter().map(|t| t.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for t in parts {
            data.extend_from_slice(t.row(r));
        }
    }
    Tensor::new(vec![rows, total], data)
}

fn vcat_scaled(parts: &[(&Tensor, f64)]) -> Result<Tensor> {
    let cols = parts[0].0.last_dim();
    let mut data = Vec::new();
    for (t, w) in parts {
        data.extend(t.data().iter().map(|v| v * w));
    }
    Tensor::new(vec![data.len() / cols, cols], data)
}

/// `Δ_merged = Σ_j w_j Δ_j`, kept in factored form.
pub fn merge_deltas(experts: &[LoraExpert], w: &[f64]) -> Result<MergedAdapter> {
    if experts.is_empty() {
        return Err(Error::Merge("no experts to merge".into()));
    }
    if w.len() != experts.len() {
        return Err(Error::Merge(format!(
            "{} merging weights for {} experts",
            w.len(),
            experts.len()
        )));
    }
    if let Some((j, v)) = w.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::Merge(format!("merging weight w[{j}] = {v} is negative")));
    }
    let (rank, alpha) = (experts[0].rank, experts[0].alpha);
    if experts.iter().any(|e| e.rank != rank || e.alpha != alpha) {
        return Err(Error::Merge("experts must share rank and alpha".into()));
    }
    for e in experts {
        if e.a_down.shape() != experts[0].a_down.shape() || e.a_up.shape() != experts[0].a_up.shape() {
            return Err(Error::Merge(format!(
                "expert factor shapes differ: {} vs {}",
                shape_str(e.a_down.shape()),
                shape_str(experts[0].a_down.shape())
            )));
        }
    }
    let mut merged = MergedAdapter {
        a_down: hcat(&experts.iter().map(|e| &e.a_down).collect::<Vec<_>>())?,
        b_down: vcat_scaled(&experts.iter().zip(w).map(|(e, &wj)| (&e.b_down, wj)).collect::<Vec<_>>())?,
        a_up: hcat(&experts.iter().map(|e| &e.a_up).collect::<Vec<_>>())?,
        b_up: vcat_scaled(&experts.iter().zip(w).map(|(e, &wj)| (&e.b_up, wj)).collect::<Vec<_>>())?,
        scale: experts[0].scale(),
    };
    for (_, t) in merged.tensors_mut() {
        t.requires_grad = true;
    }
    Ok(merged)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    /// `r_i`: mean router distribution of each sample.
    pub per_sample: Vec<Vec<f64>>,
    /// `r_b`: unweighted mean of the `r_i`.
    pub batch_mean: Vec<f64>,
    pub tokens_per_sample: Vec<usize>,
}

impl RoutingStats {
    pub fn batch_size(&self) -> usize {
        self.per_sample.len()
    }
}

/// Per-sample token means, then an unweighted mean over samples. Each entry
/// of `samples` is a `[T_i, E]` matrix of router probabilities.
pub fn batch_routing_stats(samples: &[Tensor]) -> Result<RoutingStats> {
    if samples.is_empty() {
        return Err(Error::Input("routing statistics need at least one sample".into()));
    }
    let e = samples[0].last_dim();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut tokens = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.ndim() != 2 || s.last_dim() != e {
            return Err(Error::Dimension(format!(
                "sample {i}: expected [T, {e}] router probabilities, got {}",
                shape_str(s.shape())
            )));
        }
        let t = s.rows();
        let mut r = vec![0.0; e];
        for row in 0..t {
            for (acc, p) in r.iter_mut().zip(s.row(row)) {
                *acc += p;
            }
        }
        r.iter_mut().for_each(|v| *v /= t as f64);
        per_sample.push(r);
        tokens.push(t);
    }
    let b = per_sample.len() as f64;
    let mut batch_mean = vec![0.0; e];
    for r in &per_sample {
        for (acc, v) in batch_mean.iter_mut().zip(r) {
            *acc += v;
        }
    }
    batch_mean.iter_mut().for_each(|v| *v /= b);
    Ok(RoutingStats {
        per_sample,
        batch_mean,
        tokens_per_sample: tokens,
    })
}

/// [`batch_routing_stats`] over a packed `[rows, E]` matrix, where
/// `sample_rows[i]` lists the rows of sample `i`.
pub fn batch_routing_stats_rows(probs: &Tensor, sample_rows: &[Vec<usize>]) -> Result<RoutingStats> {
    let e = probs.last_dim();
    let samples = sample_rows
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            if rows.is_empty() {
                return Err(Error::Input(format!("sample {i} has no tokens")));
            }
            let mut data = Vec::with_capacity(rows.len() * e);
            for &r in rows {
                data.extend_from_slice(probs.row(r));
            }
            Tensor::new(vec![rows.len(), e], data)
        })
        .collect::<Result<Vec<_>>>()?;
    batch_routing_stats(&samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeState {
    pub w: Vec<f64>,
    pub ema_decay: f64,
    pub router_frozen: bool,
    pub batches: usize,
}

impl MergeState {
    /// `w = 1/E`.
    pub fn uniform(n_experts: usize, ema_decay: f64) -> Result<Self> {
        if !(ema_decay > 0.0 && ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay must be in (0, 1), got {ema_decay}")));
        }
        if n_experts == 0 {
            return Err(Error::Merge("no experts to merge".into()));
        }
        Ok(MergeState {
            w: vec![1.0 / n_experts as f64; n_experts],
            ema_decay,
            router_frozen: false,
            batches: 0,
        })
    }

    /// `w ← α·w + (1−α)·r_b`
    pub fn ema_update(&mut self, r_b: &[f64]) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay must be in (0, 1), got {}", self.ema_decay)));
        }
        if r_b.len() != self.w.len() {
            return Err(Error::Dimension(format!(
                "routing statistics for {} experts, merging weights for {}",
                r_b.len(),
                self.w.len()
            )));
        }
        let s: f64 = r_b.iter().sum();
        if (s - 1.0).abs() > 1e-9 || r_b.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Input(format!("batch routing vector must lie on the simplex, sums to {s}")));
        }
        let a = self.ema_decay;
        for (w, r) in self.w.iter_mut().zip(r_b) {
            *w = a * *w + (1.0 - a) * r;
        }
        self.batches += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeStrategy {
    #[default]
    Uniform,
    Ema,
}

impl MergeStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MergeStrategy::Uniform => "uniform",
            MergeStrategy::Ema => "ema",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterPolicy {
    /// Frozen below `freeze_threshold` task samples, trainable above.
    #[default]
    Auto,
    Frozen,
    Trainable,
}

fn d_decay() -> f64 {
    0.9
}
fn d_threshold() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeConfig {
    #[serde(default)]
    pub strategy: MergeStrategy,
    #[serde(default = "d_decay")]
    pub ema_decay: f64,
    #[serde(default)]
    pub router_policy: RouterPolicy,
    #[serde(default = "d_threshold")]
    pub freeze_threshold: usize,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            strategy: MergeStrategy::Uniform,
            ema_decay: d_decay(),
            router_policy: RouterPolicy::Auto,
            freeze_threshold: d_threshold(),
        }
    }
}

impl MergeConfig {
    pub fn router_frozen(&self, n_samples: usize) -> bool {
        match self.router_policy {
            RouterPolicy::Frozen => true,
            RouterPolicy::Trainable => false,
            RouterPolicy::Auto => n_samples < self.freeze_threshold,
        }
    }
}

/// Merging weights for every MoL group while fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct MergePlan {
    pub strategy: MergeStrategy,
    /// Indexed by group - 1; `None` for groups without a MoL layer.
    pub states: Vec<Option<MergeState>>,
}

impl MergePlan {
    pub fn new(model: &RecursiveEncoder, cfg: &MergeConfig, router_frozen: bool) -> Result<Self> {
        if !model.has_mol() {
            return Err(Error::Merge("model has no MoL layers".into()));
        }
        let states = model
            .conditional
            .iter()
            .map(|c| match c {
                Some(GroupConditional::Mol(l)) => {
                    let mut s = MergeState::uniform(l.n_experts(), cfg.ema_decay)?;
                    s.router_frozen = router_frozen;
                    Ok(Some(s))
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(MergePlan {
            strategy: cfg.strategy,
            states,
        })
    }

    pub fn weights(&self) -> Vec<Option<Vec<f64>>> {
        self.states.iter().map(|s| s.as_ref().map(|s| s.w.clone())).collect()
    }

    pub fn needs_router_stats(&self) -> bool {
        self.strategy == MergeStrategy::Ema
    }

    /// Feeds one step's statistics for `group`; only ema moves `w`.
    pub fn observe(&mut self, group: usize, stats: &RoutingStats) -> Result<()> {
        if self.strategy != MergeStrategy::Ema {
            return Ok(());
        }
        match self.states.get_mut(group.wrapping_sub(1)) {
            Some(Some(s)) => s.ema_update(&stats.batch_mean),
            _ => Err(Error::Merge(format!("routing statistics for group {group}, which has no MoL layer"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReportEntry {
    pub layer: usize,
    pub w: Vec<f64>,
    pub strategy: MergeStrategy,
    pub steps: usize,
}

pub struct MergeOutcome {
    pub trainer: Trainer,
    pub records: Vec<StepRecord>,
}

impl MergeOutcome {
    pub fn plan(&self) -> &MergePlan {
        self.trainer.merge.as_ref().expect("merge fine-tuning always carries a plan")
    }

    pub fn report(&self) -> Vec<MergeReportEntry> {
        let plan = self.plan();
        plan.states
            .iter()
            .enumerate()
            .filter_map(|(i, s)| {
                s.as_ref().map(|s| MergeReportEntry {
                    layer: i + 1,
                    w: s.w.clone(),
                    strategy: plan.strategy,
                    steps: self.trainer.step(),
                })
            })
            .collect()
    }

    pub fn export(&self) -> Result<RecursiveEncoder> {
        export_merged(&self.trainer.model, self.plan())
    }
}

/// Fine-tunes with routing disabled: every MoL layer computes the `w`-weighted
/// combination of its experts. All model weights (including the expert
/// factors) train; `w` enters as a constant and, under ema, is refreshed from
/// the router's statistics after every step.
pub fn finetune_merged(
    model: RecursiveEncoder,
    task: &[Vec<usize>],
    merge: &MergeConfig,
    train: TrainConfig,
    masking: MaskingConfig,
    seed: u64,
    out: &RunOutput,
) -> Result<MergeOutcome> {
    let mut model = model;
    if !model.has_mol() {
        return Err(Error::Merge("model has no MoL layers".into()));
    }
    if merge.strategy == MergeStrategy::Ema {
        for (i, c) in model.conditional.iter().enumerate() {
            match c {
                Some(GroupConditional::Merged(_)) => {
                    return Err(Error::Config(format!(
                        "ema merging needs routing statistics but group {} is already merged (no router)",
                        i + 1
                    )))
                }
                Some(GroupConditional::Mol(l)) if l.n_experts() < 2 => {
                    return Err(Error::Config(format!(
                        "ema merging needs routing statistics but group {} routes to a single expert",
                        i + 1
                    )))
                }
                _ => {}
            }
        }
    }
    let frozen = merge.router_frozen(task.len());
    for g in 1..=model.config.n_groups {
        if let Some(l) = model.mol_layer_mut(g) {
            l.router.set_frozen(frozen);
        }
    }
    let plan = MergePlan::new(&model, merge, frozen)?;
    let mut trainer = Trainer::new(model, train, masking, seed)?;
    trainer.merge = Some(plan);
    let records = train_loop(&mut trainer, task, None, out)?;
    Ok(MergeOutcome { trainer, records })
}

/// Replaces every MoL layer with its merged adapter under `plan`'s weights.
/// The result carries no router tensors and performs no routing.
pub fn export_merged(model: &RecursiveEncoder, plan: &MergePlan) -> Result<RecursiveEncoder> {
    let mut out = model.clone();
    for (i, c) in out.conditional.iter_mut().enumerate() {
        let g = i + 1;
        let merged = match c {
            Some(GroupConditional::Mol(l)) => {
                let w = plan
                    .states
                    .get(i)
                    .and_then(|s| s.as_ref())
                    .ok_or_else(|| Error::Export(format!("MoL layer in group {g} has not been merged")))?;
                merge_deltas(&l.experts, &w.w)?
            }
            Some(GroupConditional::Moa(_)) => {
                return Err(Error::Export(format!(
                    "group {g} is a mixture of adapters, which cannot be merged"
                )))
            }
            _ => continue,
        };
        *c = Some(GroupConditional::Merged(merged));
    }
    Ok(out)
}
