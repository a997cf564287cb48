//! Property tests over randomly drawn inputs.

use mol_core::conditional::{lora_materialise, mol_forward, renormalised_topk, route_topk, topk_indices};
use mol_core::data::{decode, encode, Vocab};
use mol_core::merging::{merge_deltas, MergeState};
use mol_core::nn::{ffn_forward, rope_rotate, FfnParams, RopeConfig};
use mol_core::tensor::softmax_lastdim;
use mol_core::{MolLayer, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A MoL layer with every factor (router and `B` included) nonzero.
fn random_mol(d: usize, f: usize, e: usize, k: usize, r: usize, seed: u64) -> (FfnParams, MolLayer) {
    let mut g = rng(seed);
    let shared = FfnParams::init(d, f, true, 0.3, &mut g);
    let mut layer = MolLayer::init(d, f, e, k, r, 2.0 * r as f64, &mut g).unwrap();
    layer.router.weight = Tensor::randn(&[d, e], 1.0, &mut g);
    for ex in &mut layer.experts {
        ex.a_down = Tensor::randn(ex.a_down.shape(), 0.3, &mut g);
        ex.a_up = Tensor::randn(ex.a_up.shape(), 0.3, &mut g);
        ex.b_down = Tensor::randn(ex.b_down.shape(), 0.3, &mut g);
        ex.b_up = Tensor::randn(ex.b_up.shape(), 0.3, &mut g);
    }
    (shared, layer)
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in vec_strategy(12), shift in -50.0f64..50.0) {
        let t = Tensor::new(vec![3, 4], x.clone()).unwrap();
        let p = softmax_lastdim(&t).unwrap();
        for r in 0..3 {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_lastdim(&t.map(|v| v + shift)).unwrap();
        prop_assert!(p.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn rope_scores_depend_only_on_relative_position(
        q in vec_strategy(8), k in vec_strategy(8), m in 0usize..200, n in 0usize..200, s in 0usize..200,
    ) {
        let cfg = RopeConfig::new(10_000.0, 8, 1024).unwrap();
        let rot = |v: &[f64], pos: usize| rope_rotate(&Tensor::new(vec![1, 1, 8], v.to_vec()).unwrap(), &[pos], &cfg).unwrap();
        let a = dot(rot(&q, m).data(), rot(&k, n).data());
        let b = dot(rot(&q, m + s).data(), rot(&k, n + s).data());
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn rope_preserves_norms(x in vec_strategy(16), pos in 0usize..1000) {
        let cfg = RopeConfig::new(10_000.0, 8, 1024).unwrap();
        let t = Tensor::new(vec![1, 2, 8], x.clone()).unwrap();
        let r = rope_rotate(&t, &[pos], &cfg).unwrap();
        let n0 = dot(&x, &x);
        prop_assert!((dot(r.data(), r.data()) - n0).abs() <= 1e-10 * (1.0 + n0));
    }

    #[test]
    fn renormalised_topk_sums_to_one(x in vec_strategy(6), k in 1usize..=6) {
        let p = softmax_lastdim(&Tensor::new(vec![1, 6], x).unwrap()).unwrap();
        let r = renormalised_topk(p.data(), k);
        prop_assert_eq!(r.indices.len(), k);
        prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        if k == 1 {
            prop_assert_eq!(r.weights[0], 1.0);
        }
    }

    #[test]
    fn positive_logit_scaling_keeps_topk_indices(x in vec_strategy(6), c in 0.05f64..20.0, k in 1usize..=6) {
        let p = softmax_lastdim(&Tensor::new(vec![1, 6], x.clone()).unwrap()).unwrap();
        let scaled = softmax_lastdim(&Tensor::new(vec![1, 6], x.iter().map(|v| v * c).collect()).unwrap()).unwrap();
        // Compare on logits, where ties are exact; the softmax can only merge values.
        prop_assert_eq!(topk_indices(&x, k), topk_indices(&x.iter().map(|v| v * c).collect::<Vec<_>>(), k));
        let (a, b) = (topk_indices(p.data(), k), topk_indices(scaled.data(), k));
        let distinct = |v: &[f64]| { let mut s = v.to_vec(); s.sort_by(f64::total_cmp); s.windows(2).all(|w| w[1] - w[0] > 1e-12) };
        if distinct(p.data()) && distinct(scaled.data()) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn mol_is_invariant_to_expert_permutation(seed in 0u64..1000, rot in 1usize..4) {
        let (shared, layer) = random_mol(8, 16, 4, 2, 2, seed);
        let h = Tensor::randn(&[5, 8], 1.0, &mut rng(seed + 1));
        let base = mol_forward(&h, &shared, &layer).unwrap();
        // Rotate experts and router columns together.
        let mut permuted = layer.clone();
        let e = 4;
        let perm: Vec<usize> = (0..e).map(|i| (i + rot) % e).collect();
        permuted.experts = perm.iter().map(|&j| layer.experts[j].clone()).collect();
        let w = &layer.router.weight;
        permuted.router.weight = Tensor::from_fn(&[8, e], |idx| {
            let (row, col) = (idx / e, idx % e);
            w.data()[row * e + perm[col]]
        });
        let out = mol_forward(&h, &shared, &permuted).unwrap();
        prop_assert!(base.max_abs_diff(&out) <= 1e-12);
    }

    #[test]
    fn top1_routing_equals_the_selected_experts_lora(seed in 0u64..1000) {
        let (shared, mut layer) = random_mol(8, 16, 4, 1, 2, seed);
        layer.router.top_k = 1;
        let h = Tensor::randn(&[6, 8], 1.0, &mut rng(seed + 7));
        let out = mol_forward(&h, &shared, &layer).unwrap();
        for t in 0..6 {
            let row = Tensor::new(vec![1, 8], h.row(t).to_vec()).unwrap();
            let sel = route_topk(&row, &layer.router).unwrap().indices[0];
            let dense = lora_materialise(&shared, &layer.experts[sel]).unwrap();
            let expect = ffn_forward(&row, &dense, None).unwrap();
            let got = Tensor::new(vec![1, 8], out.row(t).to_vec()).unwrap();
            prop_assert!(got.max_abs_diff(&expect) <= 1e-12);
        }
    }

    #[test]
    fn merged_delta_is_linear_in_the_weights(seed in 0u64..1000, raw in prop::collection::vec(0.01f64..1.0, 3)) {
        let (shared, layer) = random_mol(8, 16, 3, 2, 2, seed);
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let merged = merge_deltas(&layer.experts, &w).unwrap();
        // Σ w_j (W_j − W) from the materialised experts, for both projections.
        let mut down = Tensor::zeros(shared.w_down.shape());
        let mut up = Tensor::zeros(shared.w_up.shape());
        for (e, &wj) in layer.experts.iter().zip(&w) {
            let m = lora_materialise(&shared, e).unwrap();
            down.add_assign(&m.w_down.zip_map(&shared.w_down, |a, b| wj * (a - b)).unwrap()).unwrap();
            up.add_assign(&m.w_up.zip_map(&shared.w_up, |a, b| wj * (a - b)).unwrap()).unwrap();
        }
        let got_down = merged.a_down.matmul(&merged.b_down).unwrap().scale(merged.scale);
        let got_up = merged.a_up.matmul(&merged.b_up).unwrap().scale(merged.scale);
        prop_assert!(got_down.max_abs_diff(&down) <= 1e-12);
        prop_assert!(got_up.max_abs_diff(&up) <= 1e-12);
    }

    #[test]
    fn ema_keeps_weights_on_the_simplex(
        decay in 0.01f64..0.99,
        batches in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..50),
    ) {
        let mut s = MergeState::uniform(4, decay).unwrap();
        for raw in batches {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            let r: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / 4.0) / total).collect();
            s.ema_update(&r).unwrap();
            prop_assert!(s.w.iter().all(|&v| v >= 0.0));
            prop_assert!((s.w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn distillation_kl_is_nonnegative_and_zero_on_agreement(
        s in vec_strategy(10), t in vec_strategy(10), temp in 0.5f64..5.0,
    ) {
        let teacher = Tensor::new(vec![2, 5], t).unwrap();
        let student = Tensor::new(vec![2, 5], s).unwrap();
        let kl = |st: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(st.clone());
            let l = tape.distill_kl(v, &teacher, &[0, 1], temp).unwrap();
            tape.value(l).item()
        };
        prop_assert!(kl(&student) >= -1e-12);
        prop_assert!(kl(&teacher).abs() <= 1e-12);
    }

    #[test]
    fn encode_then_decode_is_identity_on_known_tokens(
        picks in prop::collection::vec(0usize..6, 0..10), pad in 0usize..5,
    ) {
        let words = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
        let vocab = Vocab::from_tokens(words.iter().map(|w| w.to_string())).unwrap();
        let text = picks.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
        let ids = encode(&text, &vocab, picks.len() + pad);
        prop_assert_eq!(ids.len(), picks.len() + pad);
        prop_assert_eq!(decode(&ids, &vocab), text);
    }
}
