//! MLM masking, the training objective, AdamW with a linear warmup/decay
//! schedule, and the training loop.
//!
//! Every random draw in a step comes from a generator keyed on `(seed, step)`,
//! so a run resumed from a checkpoint continues bit-identically.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::conditional::RoutingRecord;
use crate::data::{MASK_ID, PAD_ID, RESERVED};
use crate::error::{Error, Result};
use crate::merging::{batch_routing_stats_rows, MergePlan};
use crate::model::{ForwardMode, RecursiveEncoder};
use crate::nn::SeqLayout;
use crate::tensor::Tensor;

fn d_mask_rate() -> f64 {
    0.30
}
fn d_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}
fn d_mask_id() -> usize {
    MASK_ID
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    #[serde(default = "d_mask_rate")]
    pub mask_rate: f64,
    /// Fractions of selected positions replaced by the mask token, by a random
    /// token, and left unchanged.
    #[serde(default = "d_split")]
    pub split: [f64; 3],
    #[serde(default = "d_mask_id")]
    pub mask_token_id: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            mask_rate: d_mask_rate(),
            split: d_split(),
            mask_token_id: MASK_ID,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate must be in [0, 1], got {}", self.mask_rate)));
        }
        if self.split.iter().any(|s| !(0.0..=1.0).contains(s)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "masking split must be three rates in [0, 1] summing to 1, got {:?}",
                self.split
            )));
        }
        if self.mask_token_id >= vocab_size {
            return Err(Error::Config(format!(
                "mask_token_id {} is outside the vocabulary of {vocab_size}",
                self.mask_token_id
            )));
        }
        if vocab_size <= RESERVED {
            return Err(Error::Config(format!("vocabulary of {vocab_size} has no ordinary tokens")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Selects each non-pad position with probability `mask_rate`, then applies
/// the mask/random/keep replacement split.
pub fn mask_tokens<R: Rng + ?Sized>(
    ids: &[usize],
    cfg: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    cfg.validate(vocab_size)?;
    if ids.is_empty() {
        return Err(Error::Input("cannot mask an empty sequence".into()));
    }
    let mut out = MaskedSequence {
        ids: ids.to_vec(),
        positions: Vec::new(),
        labels: Vec::new(),
    };
    for (pos, &id) in ids.iter().enumerate() {
        if id == PAD_ID || rng.random::<f64>() >= cfg.mask_rate {
            continue;
        }
        out.positions.push(pos);
        out.labels.push(id);
        let u: f64 = rng.random();
        if u < cfg.split[0] {
            out.ids[pos] = cfg.mask_token_id;
        } else if u < cfg.split[0] + cfg.split[1] {
            out.ids[pos] = rng.random_range(RESERVED..vocab_size);
        }
    }
    Ok(out)
}

/// A packed batch of masked sequences.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub layout: SeqLayout,
    /// `(row, label)` for every masked position.
    pub targets: Vec<(usize, usize)>,
    pub batch_size: usize,
}

impl Batch {
    /// Packs equal-length sequences; padding becomes masked-out keys.
    pub fn from_masked(seqs: &[MaskedSequence]) -> Result<Batch> {
        let seq_len = seqs
            .first()
            .map(|s| s.ids.len())
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        if seqs.iter().any(|s| s.ids.len() != seq_len) {
            return Err(Error::Input("sequences in a batch must share a length".into()));
        }
        let mut layout = SeqLayout::dense(seqs.len(), seq_len);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut targets = Vec::new();
        for (b, s) in seqs.iter().enumerate() {
            ids.extend_from_slice(&s.ids);
            for (&p, &l) in s.positions.iter().zip(&s.labels) {
                targets.push((b * seq_len + p, l));
            }
        }
        if ids.contains(&PAD_ID) {
            layout.key_mask = Some(ids.iter().map(|&i| i != PAD_ID).collect());
        }
        Ok(Batch {
            ids,
            layout,
            targets,
            batch_size: seqs.len(),
        })
    }

    /// Non-pad rows of each sample.
    pub fn sample_rows(&self) -> Vec<Vec<usize>> {
        let s = self.layout.seq_len;
        (0..self.batch_size)
            .map(|b| (b * s..(b + 1) * s).filter(|&r| self.ids[r] != PAD_ID).collect())
            .collect()
    }
}

/// Mean cross-entropy over masked positions; `None` when nothing is masked.
pub fn mlm_loss(tape: &mut Tape, logits: Var, targets: &[(usize, usize)]) -> Result<Option<Var>> {
    if targets.is_empty() {
        return Ok(None);
    }
    tape.cross_entropy(logits, targets).map(Some)
}

fn d_temperature() -> f64 {
    2.0
}
fn d_lambda() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            temperature: d_temperature(),
            lambda: d_lambda(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "distillation temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("distillation lambda must be in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `T²·KL(softmax(teacher/T) ‖ softmax(student/T))` averaged over `rows`.
pub fn distill_loss(tape: &mut Tape, student: Var, teacher: &Tensor, rows: &[usize], cfg: &DistillConfig) -> Result<Var> {
    cfg.validate()?;
    tape.distill_kl(student, teacher, rows, cfg.temperature)
}

/// Teacher logits `[rows, vocab]` for a batch (no gradient).
pub fn teacher_logits(teacher: &RecursiveEncoder, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let out = teacher.forward_tape(&mut tape, &batch.ids, &batch.layout, ForwardMode::Routed)?;
    Ok(tape.value(out.logits).clone())
}

/// Scalar pieces of one evaluation of the objective.
pub struct LossParts {
    pub total: Var,
    pub mlm: f64,
    pub distill: Option<f64>,
    pub aux: f64,
    pub routing: Vec<RoutingRecord>,
}

/// `(1−λ)·MLM + λ·distill + aux_coef·Σ_layers load_balance`.
/// Returns `None` when the batch has no masked positions.
/// `teacher` carries the teacher's logits for this batch (see [`teacher_logits`]).
pub fn objective(
    tape: &mut Tape,
    model: &RecursiveEncoder,
    batch: &Batch,
    mode: ForwardMode<'_>,
    teacher: Option<(&Tensor, &DistillConfig)>,
    aux_coef: f64,
) -> Result<Option<LossParts>> {
    let out = model.forward_tape(tape, &batch.ids, &batch.layout, mode)?;
    let Some(mlm) = mlm_loss(tape, out.logits, &batch.targets)? else {
        return Ok(None);
    };
    let mlm_value = tape.value(mlm).item();
    let mut total = mlm;
    let mut distill_value = None;
    if let Some((tlogits, dcfg)) = teacher {
        let rows: Vec<usize> = batch.targets.iter().map(|&(r, _)| r).collect();
        let kd = distill_loss(tape, out.logits, tlogits, &rows, dcfg)?;
        distill_value = Some(tape.value(kd).item());
        let a = tape.scale(mlm, 1.0 - dcfg.lambda);
        let b = tape.scale(kd, dcfg.lambda);
        total = tape.add(a, b)?;
    }
    let mut aux_value = 0.0;
    if aux_coef != 0.0 {
        for rec in out.routing.iter().filter(|r| !r.selections.is_empty()) {
            let lb = tape.load_balance(rec.probs, &rec.selections)?;
            aux_value += aux_coef * tape.value(lb).item();
            let lb = tape.scale(lb, aux_coef);
            total = tape.add(total, lb)?;
        }
    }
    Ok(Some(LossParts {
        total,
        mlm: mlm_value,
        distill: distill_value,
        aux: aux_value,
        routing: out.routing,
    }))
}

fn d_lr() -> f64 {
    5e-4
}
fn d_warmup() -> usize {
    50
}
fn d_wd() -> f64 {
    0.01
}
fn d_betas() -> (f64, f64) {
    (0.9, 0.98)
}
fn d_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_betas")]
    pub betas: (f64, f64),
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: d_lr(),
            warmup_steps: d_warmup(),
            weight_decay: d_wd(),
            betas: d_betas(),
            eps: d_eps(),
            max_grad_norm: None,
        }
    }
}

impl OptimConfig {
    /// Peak learning rates used for pretraining and fine-tuning.
    pub const PRETRAIN_LR: f64 = 5e-4;
    pub const FINETUNE_LR: f64 = 5e-5;

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "optimizer needs lr >= 0, betas in [0, 1) and eps > 0; got lr {}, betas {:?}, eps {}",
                self.lr, self.betas, self.eps
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::Config(format!("max_grad_norm must be > 0, got {n}")));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at `total`.
pub fn lr_at_step(step: usize, cfg: &OptimConfig, total: usize) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.lr * step as f64 / w as f64;
    }
    if step >= total {
        return 0.0;
    }
    cfg.lr * (total - step) as f64 / (total - w) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub total_steps: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub m: HashMap<String, Tensor>,
    pub v: HashMap<String, Tensor>,
}

impl OptimState {
    pub fn new(config: OptimConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            config,
            total_steps,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        })
    }
}

/// One bias-corrected AdamW update with decoupled weight decay. Vectors
/// (norm gains and biases) are not decayed. Returns the learning rate used.
///
/// `grads` holds every trainable tensor's gradient by name; tensors without an
/// entry are left untouched.
pub fn adamw_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &HashMap<String, Tensor>,
    state: &mut OptimState,
) -> Result<f64> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    let clip = match state.config.max_grad_norm {
        Some(max) => {
            // Fixed summation order: map iteration order varies between runs.
            let mut names: Vec<&String> = grads.keys().collect();
            names.sort();
            let norm = names
                .iter()
                .map(|n| grads[*n].data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step;
    let cfg = &state.config;
    let lr = lr_at_step(t, cfg, state.total_steps);
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (name, p) in params {
        let Some(g) = grads.get(&name) else { continue };
        if g.shape() != p.shape() {
            return Err(Error::Dimension(format!("gradient shape mismatch for {name}")));
        }
        let decay = if p.ndim() >= 2 { cfg.weight_decay } else { 0.0 };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state.v.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
        for (((x, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g * clip;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            *x -= lr * (update + decay * *x);
        }
    }
    Ok(lr)
}

fn d_batch() -> usize {
    16
}
fn d_steps() -> usize {
    500
}
fn d_aux() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Steps on the phase-1 corpus before switching to phase 2.
    #[serde(default)]
    pub phase1_steps: Option<usize>,
    #[serde(default = "d_aux")]
    pub aux_coef: f64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default)]
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: d_batch(),
            steps: d_steps(),
            phase1_steps: None,
            aux_coef: d_aux(),
            checkpoint_every: None,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The published large-batch schedule. Far beyond desk scale.
    pub fn published_preset() -> Self {
        TrainConfig {
            batch_size: 384,
            steps: 100_000,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be >= 1".into()));
        }
        if self.optim.warmup_steps > self.steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds steps ({})",
                self.optim.warmup_steps, self.steps
            )));
        }
        if !(self.aux_coef >= 0.0) {
            return Err(Error::Config(format!("aux_coef must be >= 0, got {}", self.aux_coef)));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        self.optim.validate()
    }
}

/// Generator for everything random in step `step` (0-based).
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// Draws `batch_size` sequences (with replacement) and masks them.
pub fn sample_batch<R: Rng + ?Sized>(
    corpus: &[Vec<usize>],
    batch_size: usize,
    masking: &MaskingConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if corpus.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    let seqs = (0..batch_size)
        .map(|_| {
            let s = &corpus[rng.random_range(0..corpus.len())];
            mask_tokens(s, masking, vocab_size, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_masked(&seqs)
}

/// Entropy (nats) of a non-negative histogram, normalised first.
pub fn entropy(hist: &[f64]) -> f64 {
    let total: f64 = hist.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

/// Expert usage counts for one routing record, pad rows excluded. Records
/// without hard selections fall back to summed router probabilities.
pub fn usage_histogram(tape: &Tape, rec: &RoutingRecord, ids: &[usize]) -> Vec<f64> {
    let probs = tape.value(rec.probs);
    let e = probs.last_dim();
    let mut hist = vec![0.0; e];
    for (t, &id) in ids.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        if rec.selections.is_empty() {
            for (h, p) in hist.iter_mut().zip(probs.row(t)) {
                *h += p;
            }
        } else {
            for &i in &rec.selections[t] {
                hist[i] += 1.0;
            }
        }
    }
    hist
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// `null` for a skipped batch (nothing masked).
    pub loss: Option<f64>,
    pub mlm_loss: Option<f64>,
    pub distill_loss: Option<f64>,
    pub aux_loss: Option<f64>,
    pub routing_entropy_per_mol_layer: Vec<f64>,
}

/// Model plus everything needed to take (and reproduce) training steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: RecursiveEncoder,
    pub optim: OptimState,
    pub train: TrainConfig,
    pub masking: MaskingConfig,
    pub distill: Option<(RecursiveEncoder, DistillConfig)>,
    pub merge: Option<MergePlan>,
    pub seed: u64,
}

impl Trainer {
    pub fn new(model: RecursiveEncoder, train: TrainConfig, masking: MaskingConfig, seed: u64) -> Result<Self> {
        train.validate()?;
        masking.validate(model.config.vocab_size)?;
        let optim = OptimState::new(train.optim.clone(), train.steps)?;
        Ok(Trainer {
            model,
            optim,
            train,
            masking,
            distill: None,
            merge: None,
            seed,
        })
    }

    pub fn with_teacher(mut self, teacher: RecursiveEncoder, cfg: DistillConfig) -> Result<Self> {
        cfg.validate()?;
        if teacher.config.vocab_size != self.model.config.vocab_size {
            return Err(Error::Config(format!(
                "teacher vocabulary {} differs from student vocabulary {}",
                teacher.config.vocab_size, self.model.config.vocab_size
            )));
        }
        self.distill = Some((teacher, cfg));
        Ok(self)
    }

    pub fn step(&self) -> usize {
        self.optim.step
    }

    pub fn is_done(&self) -> bool {
        self.optim.step >= self.train.steps
    }

    /// One optimisation step on `corpus`.
    pub fn train_step(&mut self, corpus: &[Vec<usize>]) -> Result<StepRecord> {
        let step = self.optim.step;
        let mut rng = step_rng(self.seed, step);
        let vocab = self.model.config.vocab_size;
        let batch = sample_batch(corpus, self.train.batch_size, &self.masking, vocab, &mut rng)?;

        let merged_weights = self.merge.as_ref().map(|m| m.weights());
        let mode = match (&self.merge, &merged_weights) {
            (Some(plan), Some(w)) => ForwardMode::Merged {
                weights: w,
                router_stats: plan.needs_router_stats(),
            },
            _ => ForwardMode::Routed,
        };
        let tlogits = match &self.distill {
            Some((t, _)) => Some(teacher_logits(t, &batch)?),
            None => None,
        };
        let teacher = tlogits.as_ref().zip(self.distill.as_ref().map(|(_, c)| c));
        let mut tape = Tape::new();
        let parts = objective(&mut tape, &self.model, &batch, mode, teacher, self.train.aux_coef)?;
        let Some(parts) = parts else {
            log::debug!("step {}: no masked positions, batch skipped", step + 1);
            self.optim.step += 1;
            return Ok(StepRecord {
                step: step + 1,
                lr: lr_at_step(step + 1, &self.optim.config, self.optim.total_steps),
                loss: None,
                mlm_loss: None,
                distill_loss: None,
                aux_loss: None,
                routing_entropy_per_mol_layer: Vec::new(),
            });
        };
        let loss = tape.value(parts.total).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at step {}", step + 1)));
        }
        let entropies = parts
            .routing
            .iter()
            .map(|r| entropy(&usage_histogram(&tape, r, &batch.ids)))
            .collect();

        tape.backward(parts.total)?;
        let mut grads = HashMap::new();
        for (name, t) in self.model.named_params() {
            if let Some(g) = tape.param_grad(t) {
                grads.insert(name, g);
            }
        }
        if let Some(plan) = &mut self.merge {
            let rows = batch.sample_rows();
            for rec in &parts.routing {
                let stats = batch_routing_stats_rows(tape.value(rec.probs), &rows)?;
                plan.observe(rec.group, &stats)?;
            }
        }
        drop(tape);
        let lr = adamw_step(self.model.named_params_mut(), &grads, &mut self.optim)?;

        Ok(StepRecord {
            step: step + 1,
            lr,
            loss: Some(loss),
            mlm_loss: Some(parts.mlm),
            distill_loss: parts.distill,
            aux_loss: Some(parts.aux),
            routing_entropy_per_mol_layer: entropies,
        })
    }

    /// Snapshot including optimizer moments, for exact resumption.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::from_trainer(self)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, masking: MaskingConfig) -> Result<Self> {
        ckpt.to_trainer(masking)
    }
}

/// Where and how often a training run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        RunOutput { dir: Some(dir.into()) }
    }

    pub fn checkpoint_path(&self, step: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("checkpoint-{step:06}.ckpt")))
    }

    pub fn final_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("final.ckpt"))
    }

    pub fn last_good_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last-good.ckpt"))
    }

    pub fn metrics_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("metrics.jsonl"))
    }
}

fn write_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    trainer.checkpoint()?.write(path)
}

/// Runs the trainer to completion: phase-1 corpus until `phase1_steps`, then
/// the phase-2 corpus (if any). Writes one JSON metrics line per step,
/// periodic checkpoints and a final checkpoint. On a non-finite loss the
/// pre-step state is saved as `last-good.ckpt` and the error returned.
pub fn train_loop(
    trainer: &mut Trainer,
    phase1: &[Vec<usize>],
    phase2: Option<&[Vec<usize>]>,
    out: &RunOutput,
) -> Result<Vec<StepRecord>> {
    if phase1.is_empty() {
        return Err(Error::Input("phase-1 corpus is empty".into()));
    }
    if let Some(p2) = phase2 {
        if p2.is_empty() {
            return Err(Error::Input("phase-2 corpus is empty".into()));
        }
    }
    let mut metrics = match out.metrics_path() {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            Some((p, std::io::BufWriter::new(file)))
        }
        None => None,
    };
    let switch = trainer.train.phase1_steps.unwrap_or(usize::MAX);
    let mut records = Vec::new();
    while !trainer.is_done() {
        let corpus = match phase2 {
            Some(p2) if trainer.step() >= switch => p2,
            _ => phase1,
        };
        let rec = match trainer.train_step(corpus) {
            Ok(r) => r,
            Err(e) => {
                if let (Error::Numeric(_), Some(p)) = (&e, out.last_good_path()) {
                    write_checkpoint(trainer, &p)?;
                    log::error!("{e}; last good state saved to {}", p.display());
                }
                return Err(e);
            }
        };
        if let Some((p, w)) = &mut metrics {
            let line = serde_json::to_string(&rec)?;
            writeln!(w, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
        }
        log::info!(
            "step {} lr {:.3e} loss {}",
            rec.step,
            rec.lr,
            rec.loss.map_or("skipped".to_string(), |l| format!("{l:.4}"))
        );
        if let (Some(every), Some(p)) = (trainer.train.checkpoint_every, out.checkpoint_path(rec.step)) {
            if rec.step % every == 0 {
                write_checkpoint(trainer, &p)?;
            }
        }
        records.push(rec);
    }
    if let Some((p, w)) = &mut metrics {
        w.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    if let Some(p) = out.final_path() {
        write_checkpoint(trainer, &p)?;
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerUsage {
    pub group: usize,
    /// Fraction of routed tokens per expert (sums to 1).
    pub usage: Vec<f64>,
    pub entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mlm_loss: f64,
    pub perplexity: f64,
    pub masked_tokens: usize,
    pub sequences: usize,
    pub layers: Vec<LayerUsage>,
}

/// Held-out MLM loss with a fixed masking seed, averaged over every masked
/// token in `corpus` (each sequence evaluated once).
pub fn evaluate(
    model: &RecursiveEncoder,
    corpus: &[Vec<usize>],
    masking: &MaskingConfig,
    batch_size: usize,
    seed: u64,
    mode: ForwardMode<'_>,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    let vocab = model.config.vocab_size;
    if let Some(&bad) = corpus.iter().flatten().find(|&&id| id >= vocab) {
        return Err(Error::Input(format!(
            "token id {bad} does not fit the model vocabulary of {vocab}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_sum = 0.0;
    let mut n_masked = 0usize;
    let mut usage: Vec<(usize, Vec<f64>)> = Vec::new();
    for chunk in corpus.chunks(batch_size.max(1)) {
        let masked = chunk
            .iter()
            .map(|s| mask_tokens(s, masking, vocab, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_masked(&masked)?;
        let mut tape = Tape::new();
        let out = model.forward_tape(&mut tape, &batch.ids, &batch.layout, mode)?;
        if let Some(l) = mlm_loss(&mut tape, out.logits, &batch.targets)? {
            loss_sum += tape.value(l).item() * batch.targets.len() as f64;
            n_masked += batch.targets.len();
        }
        for (i, rec) in out.routing.iter().enumerate() {
            let h = usage_histogram(&tape, rec, &batch.ids);
            if usage.len() <= i {
                usage.push((rec.group, vec![0.0; h.len()]));
            }
            for (a, b) in usage[i].1.iter_mut().zip(&h) {
                *a += b;
            }
        }
    }
    if n_masked == 0 {
        return Err(Error::Input("no positions were masked in the evaluation corpus".into()));
    }
    let mlm = loss_sum / n_masked as f64;
    let layers = usage
        .into_iter()
        .map(|(group, h)| {
            let total: f64 = h.iter().sum();
            LayerUsage {
                group,
                entropy: entropy(&h),
                usage: h.iter().map(|c| c / total).collect(),
            }
        })
        .collect();
    Ok(EvalReport {
        mlm_loss: mlm,
        perplexity: mlm.exp(),
        masked_tokens: n_masked,
        sequences: corpus.len(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rate_zero_and_one() {
        let ids: Vec<usize> = (3..20).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = MaskingConfig {
            mask_rate: 0.0,
            ..Default::default()
        };
        let m = mask_tokens(&ids, &none, 32, &mut rng).unwrap();
        assert!(m.positions.is_empty());
        assert_eq!(m.ids, ids);
        let all = MaskingConfig {
            mask_rate: 1.0,
            split: [1.0, 0.0, 0.0],
            ..Default::default()
        };
        let m = mask_tokens(&ids, &all, 32, &mut rng).unwrap();
        assert!(m.ids.iter().all(|&i| i == MASK_ID));
        assert_eq!(m.labels, ids);
    }

    #[test]
    fn mask_token_outside_vocab_is_config_error() {
        let cfg = MaskingConfig {
            mask_token_id: 40,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(mask_tokens(&[3, 4], &cfg, 40, &mut rng).unwrap_err().is_config());
    }

    #[test]
    fn padding_is_never_masked() {
        let cfg = MaskingConfig {
            mask_rate: 1.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = mask_tokens(&[5, 6, PAD_ID, PAD_ID], &cfg, 10, &mut rng).unwrap();
        assert_eq!(m.positions, vec![0, 1]);
    }

    #[test]
    fn schedule_points() {
        let cfg = OptimConfig {
            lr: 5e-4,
            warmup_steps: 100,
            ..Default::default()
        };
        assert_eq!(lr_at_step(0, &cfg, 1100), 0.0);
        assert_eq!(lr_at_step(100, &cfg, 1100), 5e-4);
        assert!((lr_at_step(600, &cfg, 1100) - 2.5e-4).abs() < 1e-18);
        assert_eq!(lr_at_step(1100, &cfg, 1100), 0.0);
    }

    fn one_param(v: f64) -> (Tensor, HashMap<String, Tensor>) {
        let p = Tensor::full(&[1, 1], v).with_grad(true);
        (p, HashMap::new())
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let cfg = OptimConfig {
            lr: 1e-3,
            warmup_steps: 0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, 10).unwrap();
        let (mut p, mut g) = one_param(1.0);
        g.insert("p".into(), Tensor::full(&[1, 1], 1.0));
        let lr = adamw_step(vec![("p".into(), &mut p)], &g, &mut st).unwrap();
        // m̂/√v̂ = 1 exactly, so the step is lr/(1 + eps).
        let expected = lr / (1.0 + 1e-8);
        assert!((1.0 - p.item() - expected).abs() < 1e-15, "{}", p.item());
    }

    #[test]
    fn zero_gradients_without_decay_change_nothing() {
        let cfg = OptimConfig {
            warmup_steps: 0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, 10).unwrap();
        let (mut p, mut g) = one_param(0.7);
        g.insert("p".into(), Tensor::zeros(&[1, 1]));
        for _ in 0..3 {
            adamw_step(vec![("p".into(), &mut p)], &g, &mut st).unwrap();
        }
        assert_eq!(p.item(), 0.7);
    }

    #[test]
    fn decoupled_decay_scales_parameters() {
        let cfg = OptimConfig {
            lr: 0.1,
            warmup_steps: 0,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg, 1000).unwrap();
        let (mut p, mut g) = one_param(2.0);
        g.insert("p".into(), Tensor::zeros(&[1, 1]));
        let lr = adamw_step(vec![("p".into(), &mut p)], &g, &mut st).unwrap();
        assert!((p.item() - 2.0 * (1.0 - lr * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut st = OptimState::new(OptimConfig::default(), 10).unwrap();
        let (mut p, mut g) = one_param(1.0);
        g.insert("groups.1.attn.wq".into(), Tensor::full(&[1, 1], f64::NAN));
        let err = adamw_step(vec![("groups.1.attn.wq".into(), &mut p)], &g, &mut st).unwrap_err();
        assert!(err.to_string().contains("groups.1.attn.wq"));
        assert_eq!(p.item(), 1.0);
    }

    #[test]
    fn entropy_of_histograms() {
        assert_eq!(entropy(&[5.0, 0.0]), 0.0);
        assert!((entropy(&[1.0, 1.0, 1.0, 1.0]) - 4f64.ln()).abs() < 1e-15);
    }
}
