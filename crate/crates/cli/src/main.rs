//! `mol`: pretrain, fine-tune, merge and evaluate recursive MoL encoders.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 runtime or
//! numeric error. Log level comes from `MOL_LOG_LEVEL` (error, info, debug).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mol_core::merging::MergeStrategy;
use mol_core::{Error, Result, TaskKind};
use serde_json::Value;

#[derive(Parser, Debug)]
#[command(name = "mol", version, about = "Recursive transformer encoders with Mixture-of-LoRAs")]
struct Cli {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tensor kernels (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Uniform,
    Ema,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    TwoSublanguage,
    CopyPattern,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch (two phases when data.phase2 is given).
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Continue training from `init_checkpoint` on task data.
    Finetune {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune with merged experts, then export a single-adapter checkpoint.
    Merge {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `init_checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `merge.strategy`.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Held-out MLM loss, perplexity and expert usage as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Exact and approximate parameter counts.
    CountParams {
        /// Model config (bare, or a run config with a `model` section).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Published variant: tiny, medium, base, large or all.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Perturb this tensor's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write a synthetic corpus, its vocabulary and per-document sources.
    GenData {
        #[arg(long, value_enum, default_value_t = KindArg::TwoSublanguage)]
        kind: KindArg,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 100)]
        tokens_per_source: usize,
        #[arg(long, default_value_t = 0.5)]
        mixture: f64,
        #[arg(long, default_value_t = 3)]
        branching: usize,
        #[arg(long, default_value_t = 4)]
        pattern_len: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Whitespace vocabulary from a corpus, most frequent first.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Including the reserved tokens.
        #[arg(long)]
        max_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_value(v: &Value, json: bool) {
    if json {
        println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
        return;
    }
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                match x {
                    Value::String(s) => println!("{k}: {s}"),
                    other => println!("{k}: {other}"),
                }
            }
        }
        other => println!("{other}"),
    }
}

/// `Ok(false)` signals a completed command whose result is a failure.
fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("could not configure {n} threads: {e}")))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Pretrain { config } => print_value(&commands::pretrain(&config, seed)?, cli.json),
        Command::Finetune { config } => print_value(&commands::finetune(&config, seed)?, cli.json),
        Command::Merge {
            config,
            checkpoint,
            strategy,
        } => {
            let strategy = strategy.map(|s| match s {
                StrategyArg::Uniform => MergeStrategy::Uniform,
                StrategyArg::Ema => MergeStrategy::Ema,
            });
            let report = commands::merge(&config, checkpoint.as_deref(), strategy, seed)?;
            print_value(&report, cli.json);
        }
        Command::Eval {
            checkpoint,
            corpus,
            vocab,
            batch_size,
        } => {
            let v = commands::eval(&checkpoint, &corpus, &vocab, batch_size, seed)?;
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Command::CountParams { config, variant } => {
            let rows = commands::count(config.as_deref(), variant.as_deref())?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", commands::count_table(&rows));
            }
        }
        Command::GradCheck {
            config,
            tolerance,
            corrupt,
        } => {
            let report = commands::grad_check(config.as_deref(), tolerance, corrupt, seed)?;
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                for t in &report.tensors {
                    println!(
                        "{} {:<48} numel {:>6}  worst rel err {:.3e}",
                        if t.passed { "ok  " } else { "FAIL" },
                        t.name,
                        t.numel,
                        t.worst_rel_error
                    );
                }
                println!(
                    "gradient check {} at tolerance {:e} ({} tensors)",
                    if report.passed { "passed" } else { "FAILED" },
                    report.tolerance,
                    report.tensors.len()
                );
            }
            if !report.passed {
                let names: Vec<_> = report.failures().map(|t| t.name.as_str()).collect();
                log::error!("gradient mismatch in: {}", names.join(", "));
                return Ok(false);
            }
        }
        Command::GenData {
            kind,
            samples,
            seq_len,
            tokens_per_source,
            mixture,
            branching,
            pattern_len,
            out,
        } => {
            let args = commands::GenDataArgs {
                kind: match kind {
                    KindArg::TwoSublanguage => TaskKind::TwoSublanguage,
                    KindArg::CopyPattern => TaskKind::CopyPattern,
                },
                samples,
                seq_len,
                tokens_per_source,
                mixture,
                branching,
                pattern_len,
                out,
            };
            print_value(&commands::gen_data(&args, seed)?, cli.json);
        }
        Command::BuildVocab { corpus, max_size, out } => {
            print_value(&commands::build_vocab_cmd(&corpus, max_size, &out)?, cli.json)
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MOL_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_) | Error::Usage(_)) { 2 } else { 3 })
        }
    }
}
