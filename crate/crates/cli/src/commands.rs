//! One function per subcommand. Each returns the JSON value it reports.

use std::path::{Path, PathBuf};

use mol_core::checkpoint::Checkpoint;
use mol_core::data::{build_vocab, encode_corpus, gen_synthetic, read_corpus, synthetic_vocab};
use mol_core::gradcheck::{grad_check_model, GradCheckOptions, GradCheckReport};
use mol_core::merging::{finetune_merged, MergeStrategy};
use mol_core::model::{ForwardMode, GroupConditional};
use mol_core::training::{evaluate, train_loop, EvalReport, MaskingConfig, RunOutput, StepRecord};
use mol_core::{
    build_model, count_params, load_model, save_model, DistillConfig, Error, ModelConfig, RecursiveEncoder, Result,
    SyntheticSpec, TaskKind, Trainer, Variant, Vocab,
};
use serde_json::{json, Value};

use crate::config::{existing, existing_opt, RunConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const EVAL_FILE: &str = "eval.json";
pub const MERGE_REPORT: &str = "merge-report.json";
pub const MERGED_CKPT: &str = "merged.ckpt";
const EVAL_SEED: u64 = 0;

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

pub fn check_vocab(vocab: &Vocab, model: &ModelConfig) -> Result<()> {
    if vocab.len() != model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary mismatch: vocabulary has {} tokens but the model expects vocab_size {}",
            vocab.len(),
            model.vocab_size
        )));
    }
    Ok(())
}

fn seq_len(cfg: &RunConfig, model: &ModelConfig) -> Result<usize> {
    let len = cfg.data.seq_len.unwrap_or(model.max_seq);
    if len == 0 || len > model.max_seq {
        return Err(Error::Config(format!(
            "data.seq_len: must be in 1..={} (model.max_seq), got {len}",
            model.max_seq
        )));
    }
    Ok(len)
}

/// Corpora and vocabulary a training-style command works on.
struct Inputs {
    vocab: Vocab,
    phase1: Vec<Vec<usize>>,
    phase2: Option<Vec<Vec<usize>>>,
    eval: Option<Vec<Vec<usize>>>,
}

fn load_inputs(cfg: &RunConfig, model: &ModelConfig) -> Result<Inputs> {
    let phase1_path = existing("data.phase1", cfg.data.phase1.as_deref())?;
    let phase2_path = existing_opt("data.phase2", cfg.data.phase2.as_deref())?;
    let eval_path = existing_opt("data.eval", cfg.data.eval.as_deref())?;
    let vocab = match existing_opt("data.vocab", cfg.data.vocab.as_deref())? {
        Some(p) => Vocab::load(&p)?,
        None => build_vocab(&phase1_path, model.vocab_size)?,
    };
    check_vocab(&vocab, model)?;
    let len = seq_len(cfg, model)?;
    let enc = |p: &Path| -> Result<Vec<Vec<usize>>> { Ok(encode_corpus(&read_corpus(p)?, &vocab, len)) };
    Ok(Inputs {
        phase1: enc(&phase1_path)?,
        phase2: phase2_path.as_deref().map(enc).transpose()?,
        eval: eval_path.as_deref().map(enc).transpose()?,
        vocab,
    })
}

/// Writes the vocabulary and a fully resolved config into `out`.
fn snapshot(cfg: &RunConfig, model: &ModelConfig, train: &mol_core::TrainConfig, seed: u64, inputs: &Inputs, out: &Path) -> Result<()> {
    create_dir(out)?;
    let vocab_path = out.join(VOCAB_FILE);
    inputs.vocab.save(&vocab_path)?;
    let mut resolved = cfg.clone();
    resolved.model = Some(model.clone());
    resolved.train = Some(train.clone());
    resolved.seed = Some(seed);
    resolved.data.vocab = Some(absolute(&vocab_path));
    resolved.data.seq_len = Some(seq_len(cfg, model)?);
    for p in [&mut resolved.data.phase1, &mut resolved.data.phase2, &mut resolved.data.eval, &mut resolved.init_checkpoint, &mut resolved.output_dir] {
        if let Some(x) = p {
            *x = absolute(x);
        }
    }
    write_json(&out.join(RESOLVED_CONFIG), &resolved)
}

fn fresh_metrics(out: &RunOutput) -> Result<()> {
    if let Some(p) = out.metrics_path() {
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

fn attach_teacher(cfg: &RunConfig, mut trainer: Trainer, init_student: bool) -> Result<Trainer> {
    let Some(d) = &cfg.distill else { return Ok(trainer) };
    let path = existing("distill.teacher", d.teacher.as_deref())?;
    let teacher = load_model(&path)?;
    if init_student {
        trainer.model.init_from_teacher(&teacher)?;
    }
    trainer.with_teacher(teacher, d.config())
}

fn run_summary(records: &[StepRecord], trainer: &Trainer, out: &RunOutput, eval: Option<EvalReport>) -> Value {
    let last_loss = records.iter().rev().find_map(|r| r.loss);
    json!({
        "steps": trainer.step(),
        "final_loss": last_loss,
        "checkpoint": out.final_path(),
        "metrics": out.metrics_path(),
        "eval": eval,
    })
}

fn eval_model(model: &RecursiveEncoder, corpus: &[Vec<usize>], masking: &MaskingConfig, batch: usize) -> Result<EvalReport> {
    evaluate(model, corpus, masking, batch, EVAL_SEED, ForwardMode::Routed)
}

fn train_command(cfg: &RunConfig, seed: u64, finetune: bool) -> Result<Value> {
    let out_dir = cfg.output_dir()?.to_path_buf();
    let (model, init_from_teacher) = if finetune {
        let path = existing("init_checkpoint", cfg.init_checkpoint.as_deref())?;
        let model = Checkpoint::read(&path)?.to_model()?;
        if let Some(m) = &cfg.model {
            if *m != model.config {
                return Err(Error::Config("model: differs from the configuration stored in init_checkpoint".into()));
            }
        }
        (model, false)
    } else {
        let mc = cfg.model.as_ref().ok_or_else(|| Error::Config("model: missing".into()))?;
        mc.validate()?;
        (build_model(mc, seed)?, true)
    };
    let train = cfg.train(finetune);
    let inputs = load_inputs(cfg, &model.config)?;
    let trainer = Trainer::new(model, train.clone(), cfg.masking.clone(), seed)?;
    let mut trainer = attach_teacher(cfg, trainer, init_from_teacher)?;
    snapshot(cfg, &trainer.model.config, &train, seed, &inputs, &out_dir)?;

    let out = RunOutput::in_dir(&out_dir);
    fresh_metrics(&out)?;
    let records = train_loop(&mut trainer, &inputs.phase1, inputs.phase2.as_deref(), &out)?;
    let eval = match &inputs.eval {
        Some(corpus) => {
            let r = eval_model(&trainer.model, corpus, &cfg.masking, train.batch_size)?;
            write_json(&out_dir.join(EVAL_FILE), &r)?;
            Some(r)
        }
        None => None,
    };
    Ok(run_summary(&records, &trainer, &out, eval))
}

pub fn pretrain(config: &Path, seed: Option<u64>) -> Result<Value> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed(seed)?;
    train_command(&cfg, seed, false)
}

pub fn finetune(config: &Path, seed: Option<u64>) -> Result<Value> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed(seed)?;
    train_command(&cfg, seed, true)
}

pub fn merge(config: &Path, checkpoint: Option<&Path>, strategy: Option<MergeStrategy>, seed: Option<u64>) -> Result<Value> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(c) = checkpoint {
        cfg.init_checkpoint = Some(c.to_path_buf());
    }
    if let Some(s) = strategy {
        cfg.merge.strategy = s;
    }
    let seed = cfg.seed(seed)?;
    let out_dir = cfg.output_dir()?.to_path_buf();
    let path = existing("init_checkpoint", cfg.init_checkpoint.as_deref())?;
    let model = Checkpoint::read(&path)?.to_model()?;
    if !model.has_mol() {
        return Err(Error::Merge(format!("{}: model has no MoL layers", path.display())));
    }
    let train = cfg.train(true);
    let inputs = load_inputs(&cfg, &model.config)?;
    snapshot(&cfg, &model.config, &train, seed, &inputs, &out_dir)?;
    let eval_corpus = inputs.eval.as_ref().unwrap_or(&inputs.phase1);
    let before = eval_model(&model, eval_corpus, &cfg.masking, train.batch_size)?;

    let out = RunOutput::in_dir(&out_dir);
    fresh_metrics(&out)?;
    let outcome = finetune_merged(model, &inputs.phase1, &cfg.merge, train.clone(), cfg.masking.clone(), seed, &out)?;
    let merged = outcome.export()?;
    let merged_path = out_dir.join(MERGED_CKPT);
    save_model(&merged, &merged_path)?;

    let unmerged_eval = eval_model(&outcome.trainer.model, eval_corpus, &cfg.masking, train.batch_size)?;
    let merged_eval = eval_model(&merged, eval_corpus, &cfg.masking, train.batch_size)?;
    let diff = merged_eval.mlm_loss - unmerged_eval.mlm_loss;
    let router_tensors = merged.named_params().iter().filter(|(n, _)| n.contains("router")).count();
    let frozen = outcome.trainer.model.conditional.iter().flatten().any(|c| match c {
        GroupConditional::Mol(l) => l.router.frozen,
        _ => false,
    });
    let report = json!({
        "strategy": cfg.merge.strategy,
        "router_frozen": frozen,
        "steps": outcome.trainer.step(),
        "layers": outcome.report(),
        "eval": {
            "sequences": eval_corpus.len(),
            "input_routed_loss": before.mlm_loss,
            "finetuned_routed_loss": unmerged_eval.mlm_loss,
            "merged_loss": merged_eval.mlm_loss,
            "merged_minus_unmerged": diff,
            "relative_difference": diff / unmerged_eval.mlm_loss,
        },
        "merged_checkpoint": merged_path,
        "router_tensors_in_output": router_tensors,
    });
    write_json(&out_dir.join(MERGE_REPORT), &report)?;
    Ok(report)
}

pub fn eval(checkpoint: &Path, corpus: &Path, vocab: &Path, batch_size: usize, seed: Option<u64>) -> Result<Value> {
    let checkpoint = existing("--checkpoint", Some(checkpoint))?;
    let corpus = existing("--corpus", Some(corpus))?;
    let vocab = Vocab::load(&existing("--vocab", Some(vocab))?)?;
    let model = load_model(&checkpoint)?;
    check_vocab(&vocab, &model.config)?;
    let docs = read_corpus(&corpus)?;
    let ids = encode_corpus(&docs, &vocab, model.config.max_seq);
    let report = evaluate(
        &model,
        &ids,
        &MaskingConfig::default(),
        batch_size,
        seed.unwrap_or(EVAL_SEED),
        ForwardMode::Routed,
    )?;
    Ok(serde_json::to_value(report)?)
}

/// A bare model config, or a run config's `model` section.
fn model_config_from(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: ModelConfig = if value.get("model").is_some() {
        RunConfig::load(path)?
            .model
            .ok_or_else(|| Error::Config("model: missing".into()))?
    } else {
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn count(config: Option<&Path>, variant: Option<&str>) -> Result<Value> {
    let entries: Vec<(String, ModelConfig, Option<f64>)> = match (config, variant) {
        (Some(p), None) => vec![(p.display().to_string(), model_config_from(p)?, None)],
        (None, Some("all")) => Variant::ALL
            .iter()
            .map(|v| (v.name().to_string(), v.config(), Some(v.published_params_m())))
            .collect(),
        (None, Some(name)) => {
            let v = Variant::parse(name).ok_or_else(|| {
                Error::Config(format!("unknown variant {name:?}; expected tiny, medium, base, large or all"))
            })?;
            vec![(v.name().to_string(), v.config(), Some(v.published_params_m()))]
        }
        (None, None) => return Err(Error::Usage("count-params needs --config or --variant".into())),
        (Some(_), Some(_)) => return Err(Error::Usage("pass either --config or --variant, not both".into())),
    };
    let mut rows = Vec::new();
    for (name, cfg, published) in entries {
        cfg.validate()?;
        let r = count_params(&cfg);
        rows.push(json!({
            "name": name,
            "n_layers": cfg.n_layers,
            "n_groups": cfg.n_groups,
            "d_model": cfg.d_model,
            "d_ff": cfg.d_ff,
            "n_experts": cfg.n_experts,
            "top_k": cfg.top_k,
            "mol_groups": cfg.mol_groups,
            "published_params_m": published,
            "report": r,
        }));
    }
    Ok(Value::Array(rows))
}

pub fn count_table(rows: &Value) -> String {
    let mut s = String::new();
    for row in rows.as_array().into_iter().flatten() {
        let r = &row["report"];
        s += &format!("{}\n", row["name"].as_str().unwrap_or(""));
        s += &format!(
            "  layers {}  groups {}  group size {}  hidden {}  intermediate {}  experts {} (top-{})\n",
            row["n_layers"], row["n_groups"], r["group_size"], row["d_model"], row["d_ff"], row["n_experts"], row["top_k"]
        );
        s += &format!(
            "  unique params {}  full-equivalent {}  ratio {:.6}\n",
            r["unique_params"],
            r["full_equivalent_params"],
            r["ratio"].as_f64().unwrap_or(f64::NAN)
        );
        s += &format!(
            "  block params: unique {} / full {} = {:.6}  (12Kd^2 ~ {}, 12Nd^2 ~ {})\n",
            r["unique_block_params"],
            r["full_block_params"],
            r["block_ratio"].as_f64().unwrap_or(f64::NAN),
            r["approx_unique_blocks"],
            r["approx_full_blocks"]
        );
        if let Some(p) = row["published_params_m"].as_f64() {
            s += &format!("  published total ~{p}M\n");
        }
    }
    s
}

/// The default gradient-check model: 4 layers in 2 groups, width 32, one
/// MoL group with 4 experts, top-2, rank 4.
pub fn default_grad_check_config() -> ModelConfig {
    ModelConfig {
        mol_groups: vec![2],
        n_experts: 4,
        top_k: 2,
        lora_rank: 4,
        ..ModelConfig::toy(4, 2, 32, 24)
    }
}

pub fn grad_check(config: Option<&Path>, tolerance: f64, corrupt: Option<String>, seed: Option<u64>) -> Result<GradCheckReport> {
    let (model, distill, aux) = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            let value: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if value.get("model").is_some() {
                let run = RunConfig::load(p)?;
                let aux = run.train(false).aux_coef;
                (
                    run.model.ok_or_else(|| Error::Config("model: missing".into()))?,
                    run.distill.map(|d| d.config()),
                    aux,
                )
            } else {
                (model_config_from(p)?, Some(DistillConfig::default()), 0.01)
            }
        }
        None => (default_grad_check_config(), Some(DistillConfig::default()), 0.01),
    };
    model.validate()?;
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("--tolerance must be > 0, got {tolerance}")));
    }
    let opts = GradCheckOptions {
        tolerance,
        corrupt,
        ..GradCheckOptions::default()
    };
    grad_check_model(&model, distill.as_ref(), aux, seed.unwrap_or(0), &opts)
}

pub struct GenDataArgs {
    pub kind: TaskKind,
    pub samples: usize,
    pub seq_len: usize,
    pub tokens_per_source: usize,
    pub mixture: f64,
    pub branching: usize,
    pub pattern_len: usize,
    pub out: PathBuf,
}

pub fn gen_data(a: &GenDataArgs, seed: Option<u64>) -> Result<Value> {
    let spec = SyntheticSpec {
        kind: a.kind,
        tokens_per_source: a.tokens_per_source,
        seq_len: a.seq_len,
        mixture: a.mixture,
        branching: a.branching,
        pattern_len: a.pattern_len,
        seed: seed.unwrap_or(0),
    };
    let corpus = gen_synthetic(&spec, a.samples)?;
    let vocab = synthetic_vocab(&spec)?;
    create_dir(&a.out)?;
    let write = |name: &str, lines: Vec<String>| -> Result<PathBuf> {
        let p = a.out.join(name);
        let mut text = lines.join("\n");
        text.push('\n');
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    let corpus_path = write("corpus.txt", corpus.docs.clone())?;
    let sources_path = write("sources.txt", corpus.sources.iter().map(|s| s.to_string()).collect())?;
    let vocab_path = a.out.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    write_json(&a.out.join("spec.json"), &spec)?;
    Ok(json!({
        "documents": corpus.docs.len(),
        "vocab_size": vocab.len(),
        "corpus": corpus_path,
        "sources": sources_path,
        "vocab": vocab_path,
    }))
}

pub fn build_vocab_cmd(corpus: &Path, max_size: usize, out: &Path) -> Result<Value> {
    let corpus = existing("--corpus", Some(corpus))?;
    let vocab = build_vocab(&corpus, max_size)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    vocab.save(out)?;
    Ok(json!({ "vocab_size": vocab.len(), "vocab": out }))
}
