//! Oracles that span several modules: naive attention, corpus statistics,
//! masking rates, training resume, merged export and checkpoint accounting.

use mol_core::checkpoint::Checkpoint;
use mol_core::conditional::routed_token_count;
use mol_core::data::{encode_corpus, gen_synthetic, synthetic_vocab, MASK_ID, PAD_ID};
use mol_core::merging::{finetune_merged, MergeConfig, MergeStrategy, RouterPolicy};
use mol_core::model::{ForwardMode, GroupConditional};
use mol_core::nn::{attention, AttentionParams, RopeConfig};
use mol_core::training::{mask_tokens, train_loop, MaskingConfig, RunOutput, TrainConfig, Trainer};
use mol_core::{build_model, ModelConfig, OptimConfig, RecursiveEncoder, SyntheticSpec, TaskKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        kind: TaskKind::TwoSublanguage,
        tokens_per_source: 12,
        seq_len: 10,
        mixture: 0.5,
        branching: 3,
        pattern_len: 4,
        seed,
    }
}

/// Encoded two-sublanguage corpus and a small MoL model sized for it.
fn toy(seed: u64) -> (Vec<Vec<usize>>, ModelConfig) {
    let s = spec(seed);
    let corpus = gen_synthetic(&s, 64).unwrap();
    let vocab = synthetic_vocab(&s).unwrap();
    let ids = encode_corpus(&corpus.docs, &vocab, s.seq_len);
    let cfg = ModelConfig {
        d_ff: 32,
        n_heads: 2,
        max_seq: 16,
        mol_groups: vec![2],
        n_experts: 3,
        top_k: 2,
        lora_rank: 2,
        ..ModelConfig::toy(4, 2, 16, vocab.len())
    };
    (ids, cfg)
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps,
        optim: OptimConfig {
            warmup_steps: 2,
            lr: 3e-3,
            ..OptimConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn attention_matches_a_naive_implementation() {
    let (seq, d, heads) = (5, 8, 2);
    let hd = d / heads;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = AttentionParams::init(d, heads, 0.5, &mut rng).unwrap();
    let cfg = RopeConfig::new(10_000.0, hd, 16).unwrap();
    let x = Tensor::randn(&[seq, d], 1.0, &mut rng);
    let mask = [true, true, false, true, true];
    let got = attention(&x, &p, &cfg, Some(&mask)).unwrap();

    let proj = |w: &Tensor| x.matmul(w).unwrap();
    let (q, k, v) = (proj(&p.wq), proj(&p.wk), proj(&p.wv));
    // Rotation of the pair (2j, 2j+1) within a head by pos·base^(−2j/hd).
    let rot = |t: &Tensor, pos: usize, h: usize| -> Vec<f64> {
        let row = &t.row(pos)[h * hd..(h + 1) * hd];
        let mut out = row.to_vec();
        for j in 0..hd / 2 {
            let theta = pos as f64 * 10_000f64.powf(-(2.0 * j as f64) / hd as f64);
            let (s, c) = theta.sin_cos();
            out[2 * j] = row[2 * j] * c - row[2 * j + 1] * s;
            out[2 * j + 1] = row[2 * j] * s + row[2 * j + 1] * c;
        }
        out
    };
    let mut ctx = Tensor::zeros(&[seq, d]);
    for h in 0..heads {
        for i in 0..seq {
            let qi = rot(&q, i, h);
            let scores: Vec<f64> = (0..seq)
                .map(|j| {
                    if !mask[j] {
                        return f64::NEG_INFINITY;
                    }
                    let kj = rot(&k, j, h);
                    qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..seq {
                let pij = e[j] / z;
                assert!((got.weights.data()[(h * seq + i) * seq + j] - pij).abs() < 1e-12);
                for t in 0..hd {
                    ctx.row_mut(i)[h * hd + t] += pij * v.row(j)[h * hd + t];
                }
            }
        }
    }
    let expect = ctx.matmul(&p.wo).unwrap();
    assert!(got.output.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn generated_bigrams_match_the_transition_matrix() {
    let s = SyntheticSpec {
        tokens_per_source: 8,
        seq_len: 100,
        mixture: 1.0,
        ..spec(11)
    };
    // mixture 1.0: every document comes from source A; 1000 × 100 = 10⁵ tokens.
    let corpus = gen_synthetic(&s, 1000).unwrap();
    assert!(corpus.sources.iter().all(|&x| x == 0));
    let src = &corpus.markov[0];
    let index = |t: &str| src.tokens.iter().position(|x| x == t).unwrap();
    let n = src.tokens.len();
    let mut counts = vec![vec![0usize; n]; n];
    let mut total = 0;
    for doc in &corpus.docs {
        let ids: Vec<usize> = doc.split_whitespace().map(index).collect();
        total += ids.len();
        for w in ids.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
    }
    assert_eq!(total, 100_000);
    for i in 0..n {
        let row: usize = counts[i].iter().sum();
        for j in 0..n {
            let emp = counts[i][j] as f64 / row as f64;
            assert!(
                (emp - src.prob(i, j)).abs() <= 0.02,
                "transition {i}->{j}: empirical {emp:.4}, expected {:.4}",
                src.prob(i, j)
            );
        }
    }
}

#[test]
fn masking_rate_and_split_match_the_config() {
    let cfg = MaskingConfig::default();
    let vocab = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut eligible, mut selected, mut masked, mut kept) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..2000 {
        let ids: Vec<usize> = (0..64).map(|i| if i >= 56 { PAD_ID } else { 3 + (i * 7) % 47 }).collect();
        let m = mask_tokens(&ids, &cfg, vocab, &mut rng).unwrap();
        eligible += 56;
        selected += m.positions.len();
        for (&p, &label) in m.positions.iter().zip(&m.labels) {
            assert!(p < 56, "padding was selected");
            assert_eq!(label, ids[p]);
            if m.ids[p] == MASK_ID {
                masked += 1;
            } else if m.ids[p] == ids[p] {
                kept += 1;
            }
        }
    }
    let rate = selected as f64 / eligible as f64;
    assert!((rate - 0.3).abs() <= 0.01, "mask rate {rate}");
    let frac_mask = masked as f64 / selected as f64;
    // Random replacements can coincide with the original token (1 in 47).
    let frac_kept = kept as f64 / selected as f64;
    assert!((frac_mask - 0.8).abs() <= 0.01, "mask fraction {frac_mask}");
    assert!((frac_kept - (0.1 + 0.1 / 47.0)).abs() <= 0.01, "kept fraction {frac_kept}");
}

fn losses(records: &[mol_core::training::StepRecord]) -> Vec<Option<u64>> {
    records.iter().map(|r| r.loss.map(f64::to_bits)).collect()
}

#[test]
fn resume_reproduces_the_loss_trajectory_bit_exactly() {
    let (corpus, cfg) = toy(1);
    let fresh = || Trainer::new(build_model(&cfg, 4).unwrap(), train_cfg(12), MaskingConfig::default(), 9).unwrap();
    let mut straight = fresh();
    let all = train_loop(&mut straight, &corpus, None, &RunOutput::default()).unwrap();

    let mut first = fresh();
    let mut head = Vec::new();
    for _ in 0..5 {
        head.push(first.train_step(&corpus).unwrap());
    }
    let bytes = Checkpoint::from_trainer(&first).unwrap().to_bytes().unwrap();
    drop(first);
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().to_trainer(MaskingConfig::default()).unwrap();
    assert_eq!(resumed.step(), 5);
    let tail = train_loop(&mut resumed, &corpus, None, &RunOutput::default()).unwrap();
    head.extend(tail);
    assert_eq!(losses(&head), losses(&all));
    assert_eq!(Checkpoint::from_model(&resumed.model), Checkpoint::from_model(&straight.model));
}

#[test]
fn merged_fine_tuning_resumes_bit_exactly() {
    let (corpus, cfg) = toy(2);
    let model = build_model(&cfg, 5).unwrap();
    let merge = MergeConfig {
        strategy: MergeStrategy::Ema,
        router_policy: RouterPolicy::Trainable,
        ..MergeConfig::default()
    };
    let full = finetune_merged(model, &corpus, &merge, train_cfg(8), MaskingConfig::default(), 3, &RunOutput::default())
        .unwrap();
    assert_eq!(losses(&full.records), losses(&finetune_split(&cfg, &corpus, &merge)));
}

/// Same merged run, split at step 4 through a checkpoint.
fn finetune_split(cfg: &ModelConfig, corpus: &[Vec<usize>], merge: &MergeConfig) -> Vec<mol_core::training::StepRecord> {
    let model = build_model(cfg, 5).unwrap();
    let mut trainer = Trainer::new(model, train_cfg(8), MaskingConfig::default(), 3).unwrap();
    let frozen = merge.router_frozen(corpus.len());
    let mut records = Vec::new();
    // Build the plan exactly as finetune_merged does.
    for g in 1..=trainer.model.config.n_groups {
        if let Some(l) = trainer.model.mol_layer_mut(g) {
            l.router.set_frozen(frozen);
        }
    }
    trainer.merge = Some(mol_core::merging::MergePlan::new(&trainer.model, merge, frozen).unwrap());
    for _ in 0..4 {
        records.push(trainer.train_step(corpus).unwrap());
    }
    let bytes = Checkpoint::from_trainer(&trainer).unwrap().to_bytes().unwrap();
    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().to_trainer(MaskingConfig::default()).unwrap();
    assert_eq!(resumed.merge, trainer.merge);
    while !resumed.is_done() {
        records.push(resumed.train_step(corpus).unwrap());
    }
    records
}

fn merged_run(seed: u64) -> (Vec<Vec<usize>>, mol_core::merging::MergeOutcome) {
    let (corpus, cfg) = toy(seed);
    let mut model = build_model(&cfg, seed).unwrap();
    // Pretend the router was trained so the ema weights move away from uniform.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = model.mol_layer_mut(2).unwrap();
    l.router.weight = Tensor::randn(l.router.weight.shape(), 1.0, &mut rng).with_grad(true);
    let merge = MergeConfig {
        strategy: MergeStrategy::Ema,
        ..MergeConfig::default()
    };
    let out = finetune_merged(model, &corpus, &merge, train_cfg(6), MaskingConfig::default(), seed, &RunOutput::default())
        .unwrap();
    (corpus, out)
}

#[test]
fn merged_export_round_trips_and_matches_the_merged_forward() {
    let (corpus, outcome) = merged_run(4);
    let w = outcome.plan().weights();
    assert!(w[1].as_ref().unwrap().iter().any(|&x| (x - 1.0 / 3.0).abs() > 1e-6));
    let exported = outcome.export().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("merged.ckpt");
    mol_core::save_model(&exported, &path).unwrap();
    let loaded = mol_core::load_model(&path).unwrap();
    assert!(matches!(loaded.conditional[1], Some(GroupConditional::Merged(_))));

    let ids: Vec<usize> = corpus[..3].concat();
    let layout = mol_core::nn::SeqLayout::dense(3, corpus[0].len());
    let forward = |m: &RecursiveEncoder, mode: ForwardMode<'_>| {
        let mut tape = mol_core::Tape::new();
        let out = m.forward_tape(&mut tape, &ids, &layout, mode).unwrap();
        tape.value(out.logits).clone()
    };
    let in_memory = forward(&exported, ForwardMode::Routed);
    let from_disk = forward(&loaded, ForwardMode::Routed);
    assert_eq!(in_memory, from_disk);
    let merged_mode = forward(
        &outcome.trainer.model,
        ForwardMode::Merged {
            weights: &w,
            router_stats: false,
        },
    );
    assert!(in_memory.max_abs_diff(&merged_mode) <= 1e-12);
}

#[test]
fn merged_checkpoint_drops_exactly_the_router_bytes() {
    let (_, outcome) = merged_run(5);
    let before = Checkpoint::from_model(&outcome.trainer.model);
    let after = Checkpoint::from_model(&outcome.export().unwrap());
    let router = before.payload_bytes(|n| n.contains("router"));
    let cfg = &outcome.trainer.model.config;
    assert_eq!(router, cfg.d_model * cfg.n_experts * 8);
    assert_eq!(after.payload_bytes(|n| n.contains("router")), 0);
    assert_eq!(before.payload_bytes(|_| true) - after.payload_bytes(|_| true), router);
    let (b, a) = (before.to_bytes().unwrap(), after.to_bytes().unwrap());
    // Header sizes differ; payloads differ by exactly the router tensor.
    let payload = |x: &[u8]| x.len() - x.iter().position(|&c| c == 0).unwrap() - 1;
    assert_eq!(payload(&b) - payload(&a), router);
}

#[test]
fn merged_model_performs_no_routing() {
    let (corpus, outcome) = merged_run(6);
    let exported = outcome.export().unwrap();
    let before = routed_token_count();
    exported.forward_mlm(&corpus[0]).unwrap();
    assert_eq!(routed_token_count(), before);
    outcome.trainer.model.forward_mlm(&corpus[0]).unwrap();
    assert!(routed_token_count() > before);
}

#[test]
fn ema_with_identical_experts_and_uniform_routing_tracks_uniform() {
    let (corpus, cfg) = toy(7);
    let mut model = build_model(&cfg, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = model.mol_layer_mut(2).unwrap();
    let mut e0 = l.experts[0].clone();
    e0.b_down = Tensor::randn(e0.b_down.shape(), 0.1, &mut rng).with_grad(true);
    e0.b_up = Tensor::randn(e0.b_up.shape(), 0.1, &mut rng).with_grad(true);
    l.experts.iter_mut().for_each(|e| *e = e0.clone());
    let run = |strategy| {
        let merge = MergeConfig {
            strategy,
            router_policy: RouterPolicy::Frozen,
            ..MergeConfig::default()
        };
        finetune_merged(model.clone(), &corpus, &merge, train_cfg(6), MaskingConfig::default(), 2, &RunOutput::default())
            .unwrap()
    };
    let (u, e) = (run(MergeStrategy::Uniform), run(MergeStrategy::Ema));
    for (a, b) in u.records.iter().zip(&e.records) {
        let (a, b) = (a.loss.unwrap(), b.loss.unwrap());
        assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
    }
    for w in e.plan().weights().into_iter().flatten() {
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
    }
}

#[test]
fn phase_two_corpus_takes_over_after_the_switch() {
    let (corpus, cfg) = toy(8);
    let other: Vec<Vec<usize>> = corpus.iter().map(|s| s.iter().map(|&t| if t >= 3 { 3 } else { t }).collect()).collect();
    let run = |phase1_steps, phase2: Option<&[Vec<usize>]>| {
        let train = TrainConfig {
            phase1_steps,
            ..train_cfg(6)
        };
        let mut t = Trainer::new(build_model(&cfg, 1).unwrap(), train, MaskingConfig::default(), 1).unwrap();
        losses(&train_loop(&mut t, &corpus, phase2, &RunOutput::default()).unwrap())
    };
    let single = run(None, None);
    let switched = run(Some(3), Some(&other));
    assert_eq!(single[..3], switched[..3]);
    assert_ne!(single[3..], switched[3..]);
}
