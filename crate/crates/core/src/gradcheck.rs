//! Central finite-difference check of every trainable tensor's gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{build_model, teacher_config, ForwardMode, GroupConditional, ModelConfig, RecursiveEncoder};
use crate::tensor::Tensor;
use crate::training::{mask_tokens, objective, teacher_logits, Batch, DistillConfig, MaskingConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Larger models are refused (the check costs two forwards per scalar).
    pub max_params: usize,
    /// Test fixture: perturb this tensor's analytic gradient before comparing.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            max_params: 100_000,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    /// `max|analytic − numeric| / max(max|analytic|, max|numeric|)`
    pub worst_rel_error: f64,
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

/// Compares `loss`'s analytic gradient with central differences for every
/// tensor of `model` that requires grad.
pub fn check_gradients<F>(model: &RecursiveEncoder, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&RecursiveEncoder, &mut Tape) -> Result<Var>,
{
    let n = model.param_count();
    if n > opts.max_params {
        return Err(Error::Usage(format!(
            "gradient check refused: {n} parameters exceeds the limit of {}; \
             shrink d_model, d_ff, vocab_size or n_groups",
            opts.max_params
        )));
    }
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    tape.backward(l)?;
    let analytic: Vec<(String, Option<Tensor>)> = model
        .named_params()
        .into_iter()
        .map(|(name, t)| {
            let g = tape.param_grad(t);
            (name, g)
        })
        .collect();
    drop(tape);

    let eval = |m: &RecursiveEncoder| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(m, &mut tape)?;
        Ok(tape.value(l).item())
    };
    let mut work = model.clone();
    let mut tensors = Vec::new();
    for (idx, (name, grad)) in analytic.into_iter().enumerate() {
        let Some(mut grad) = grad else { continue };
        if opts.corrupt.as_deref() == Some(name.as_str()) {
            grad = grad.map(|g| 1.1 * g + 1e-3);
        }
        let numel = grad.numel();
        let mut numeric = vec![0.0; numel];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = param_at(&mut work, idx).data()[j];
            param_at(&mut work, idx).data_mut()[j] = orig + opts.step;
            let up = eval(&work)?;
            param_at(&mut work, idx).data_mut()[j] = orig - opts.step;
            let down = eval(&work)?;
            param_at(&mut work, idx).data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * opts.step);
        }
        let max_a = grad.max_abs();
        let max_n = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = grad
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = max_a.max(max_n);
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        // A tensor whose gradient is identically zero (both ways) passes trivially.
        let passed = rel < opts.tolerance && rel.is_finite();
        tensors.push(TensorCheck {
            name,
            numel,
            worst_rel_error: rel,
            max_abs_grad: max_a,
            passed,
        });
    }
    let passed = tensors.iter().all(|t| t.passed);
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        tensors,
        passed,
    })
}

fn param_at(model: &mut RecursiveEncoder, idx: usize) -> &mut Tensor {
    model.named_params_mut().swap_remove(idx).1
}

/// Moves zero-initialised pieces (routers, LoRA `B`, adapter up-projections,
/// norm affine terms) off their special values so every gradient is generic
/// and top-k selections are far from ties.
pub fn randomize_for_check(model: &mut RecursiveEncoder, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturb = |t: &mut Tensor, std: f64, offset: f64| {
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = offset + n;
        }
    };
    for g in &mut model.groups {
        for ln in [&mut g.attn_norm, &mut g.ffn_norm] {
            perturb(&mut ln.gain, 0.1, 1.0);
            perturb(&mut ln.bias, 0.1, 0.0);
        }
    }
    perturb(&mut model.final_norm.gain, 0.1, 1.0);
    perturb(&mut model.final_norm.bias, 0.1, 0.0);
    for c in model.conditional.iter_mut().flatten() {
        match c {
            GroupConditional::Mol(l) => {
                perturb(&mut l.router.weight, 1.0, 0.0);
                for e in &mut l.experts {
                    perturb(&mut e.a_down, 0.3, 0.0);
                    perturb(&mut e.a_up, 0.3, 0.0);
                    perturb(&mut e.b_down, 0.3, 0.0);
                    perturb(&mut e.b_up, 0.3, 0.0);
                }
            }
            GroupConditional::Moa(l) => {
                perturb(&mut l.router.weight, 1.0, 0.0);
                for a in &mut l.adapters {
                    perturb(&mut a.up, 0.3, 0.0);
                }
            }
            GroupConditional::Merged(m) => {
                perturb(&mut m.b_down, 0.3, 0.0);
                perturb(&mut m.b_up, 0.3, 0.0);
            }
        }
    }
}

/// The full training objective (MLM, optional distillation from a random
/// dense teacher, load-balance auxiliary) on a fixed small batch.
pub fn grad_check_model(
    cfg: &ModelConfig,
    distill: Option<&DistillConfig>,
    aux_coef: f64,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut model = build_model(cfg, seed)?;
    // Weights large enough that activations are not all near zero.
    for (_, t) in model.named_params_mut() {
        if t.ndim() == 2 {
            t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
        }
    }
    let batch = check_batch(cfg, seed)?;
    // Redraw until every expert is picked by some token, so none is checked
    // only through an identically zero gradient.
    let base = model.clone();
    for attempt in 0..32u64 {
        model = base.clone();
        randomize_for_check(&mut model, seed.wrapping_add(1).wrapping_add(attempt << 32));
        if all_experts_selected(&model, &batch)? {
            break;
        }
    }
    let teacher = match distill {
        Some(d) => {
            d.validate()?;
            let mut t = build_model(&teacher_config(cfg), seed.wrapping_add(2))?;
            randomize_for_check(&mut t, seed.wrapping_add(3));
            Some((teacher_logits(&t, &batch)?, d.clone()))
        }
        None => None,
    };
    let loss = |m: &RecursiveEncoder, tape: &mut Tape| -> Result<Var> {
        let t = teacher.as_ref().map(|(l, d)| (l, d));
        let parts = objective(tape, m, &batch, ForwardMode::Routed, t, aux_coef)?
            .ok_or_else(|| Error::Usage("gradient-check batch has no masked positions".into()))?;
        Ok(parts.total)
    };
    check_gradients(&model, loss, opts)
}

fn all_experts_selected(model: &RecursiveEncoder, batch: &Batch) -> Result<bool> {
    let mut tape = Tape::new();
    let out = model.forward_tape(&mut tape, &batch.ids, &batch.layout, ForwardMode::Routed)?;
    Ok(out.routing.iter().all(|rec| {
        let n_experts = tape.value(rec.probs).shape()[1];
        let mut seen = vec![false; n_experts];
        // Only masked rows are guaranteed to reach the loss.
        for &(row, _) in &batch.targets {
            rec.selections[row].iter().for_each(|&e| seen[e] = true);
        }
        seen.iter().all(|&s| s)
    }))
}

fn check_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let seq_len = cfg.max_seq.min(8);
    let masking = MaskingConfig {
        mask_rate: 0.5,
        ..MaskingConfig::default()
    };
    let seqs = (0..2)
        .map(|_| {
            let ids: Vec<usize> = (0..seq_len).map(|_| rng.random_range(3..cfg.vocab_size)).collect();
            let mut m = mask_tokens(&ids, &masking, cfg.vocab_size, &mut rng)?;
            if m.positions.is_empty() {
                m.positions.push(0);
                m.labels.push(ids[0]);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    Batch::from_masked(&seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            mol_groups: vec![1],
            n_experts: 3,
            top_k: 2,
            lora_rank: 2,
            ..ModelConfig::toy(2, 1, 16, 10)
        }
    }

    #[test]
    fn small_model_passes_and_every_expert_has_gradient() {
        let r = grad_check_model(&small(), Some(&DistillConfig::default()), 0.01, 0, &GradCheckOptions::default())
            .unwrap();
        assert!(r.passed, "{:?}", r.failures().collect::<Vec<_>>());
        for t in r.tensors.iter().filter(|t| t.name.contains(".experts.")) {
            assert!(t.max_abs_grad > 0.0, "{} has zero gradient", t.name);
        }
    }

    #[test]
    fn corrupted_gradient_is_reported_by_name() {
        let opts = GradCheckOptions {
            corrupt: Some("groups.1.mol.experts.0.b_up".into()),
            ..Default::default()
        };
        let r = grad_check_model(&small(), None, 0.0, 1, &opts).unwrap();
        assert!(!r.passed);
        let failed: Vec<_> = r.failures().map(|t| t.name.as_str()).collect();
        assert_eq!(failed, ["groups.1.mol.experts.0.b_up"]);
    }

    #[test]
    fn oversize_model_is_refused() {
        let opts = GradCheckOptions {
            max_params: 10,
            ..Default::default()
        };
        let err = grad_check_model(&small(), None, 0.0, 0, &opts).unwrap_err();
        assert!(err.to_string().contains("exceeds the limit"), "{err}");
    }
}
