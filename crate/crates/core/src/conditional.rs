//! Routers, LoRA experts, the Mixture-of-LoRAs layer and the Mixture-of-Adapters
//! baseline.
//!
//! A MoL layer keeps one shared FFN and injects each expert's low-rank update
//! straight into its `w_down`/`w_up` weights:
//!
//! ```text
//! FFN_i(h) = (W_up + s·A₂B₂) σ((W_down + s·A₁B₁) h),   s = α/r
//! MoL(h)   = Σ_{i ∈ topk(p(h))} p̂_i(h) · FFN_i(h)
//! ```
//!
//! where `p̂` is the router distribution renormalised over the selected experts.
//! Routing is per token. The MoA baseline instead applies routed bottleneck
//! adapters to the FFN *output*.

use std::cell::Cell;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_str, Error, Result};
use crate::nn::{ffn_tape, FfnDelta, FfnParams, LowRankTerm};
use crate::tensor::{softmax_lastdim, Tensor};

pub const LORA_INIT_STD: f64 = 0.02;

thread_local! {
    static ROUTED_TOKENS: Cell<u64> = const { Cell::new(0) };
}

/// Number of tokens routed on this thread so far.
pub fn routed_token_count() -> u64 {
    ROUTED_TOKENS.with(|c| c.get())
}

fn count_routed(n: usize) {
    ROUTED_TOKENS.with(|c| c.set(c.get() + n as u64));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    /// `[d, E]`
    pub weight: Tensor,
    pub top_k: usize,
    pub frozen: bool,
}

impl Router {
    /// Zero weights, so the initial routing distribution is uniform.
    pub fn zeros(d: usize, n_experts: usize, top_k: usize) -> Result<Self> {
        if n_experts == 0 || top_k == 0 || top_k > n_experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={n_experts}, got {top_k}"
            )));
        }
        Ok(Router {
            weight: Tensor::zeros(&[d, n_experts]).with_grad(true),
            top_k,
            frozen: false,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.weight.requires_grad = !frozen;
    }

    /// Routing distribution `softmax(h·W_r)` for `h: [n, d]`.
    pub fn probs(&self, h: &Tensor) -> Result<Tensor> {
        softmax_lastdim(&h.matmul(&self.weight)?)
    }
}

/// Indices of the `k` largest entries, descending; ties go to the lower index.
pub fn topk_indices(p: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Selected experts for a single token and their renormalised weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Top-k routing of one (already normalised) hidden vector `h: [d]`.
pub fn route_topk(h: &Tensor, router: &Router) -> Result<Routing> {
    let d = router.weight.shape()[0];
    if h.numel() != d {
        return Err(Error::Dimension(format!(
            "route_topk: hidden {} for router {}",
            shape_str(h.shape()),
            shape_str(router.weight.shape())
        )));
    }
    let p = router.probs(&h.reshape(&[1, d])?)?;
    count_routed(1);
    Ok(renormalised_topk(p.data(), router.top_k))
}

/// Top-k of a probability vector with the selected mass renormalised to 1.
pub fn renormalised_topk(p: &[f64], k: usize) -> Routing {
    let indices = topk_indices(p, k);
    let total: f64 = indices.iter().map(|&i| p[i]).sum();
    let weights = indices.iter().map(|&i| p[i] / total).collect();
    Routing { indices, weights }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert {
    /// `[d, r]`
    pub a_down: Tensor,
    /// `[r, f]`
    pub b_down: Tensor,
    /// `[f, r]`
    pub a_up: Tensor,
    /// `[r, d]`
    pub b_up: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

pub fn check_lora_rank(d: usize, f: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d.min(f) / 4 {
        return Err(Error::Config(format!(
            "LoRA rank {rank} must be in 1..={} for d={d}, f={f}",
            d.min(f) / 4
        )));
    }
    Ok(())
}

impl LoraExpert {
    /// `A ~ N(0, 0.02²)`, `B = 0`: the expert starts as a zero update.
    pub fn init<R: Rng + ?Sized>(d: usize, f: usize, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        check_lora_rank(d, f, rank)?;
        Ok(LoraExpert {
            a_down: Tensor::randn(&[d, rank], LORA_INIT_STD, rng).with_grad(true),
            b_down: Tensor::zeros(&[rank, f]).with_grad(true),
            a_up: Tensor::randn(&[f, rank], LORA_INIT_STD, rng).with_grad(true),
            b_up: Tensor::zeros(&[rank, d]).with_grad(true),
            rank,
            alpha,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn delta(&self) -> FfnDelta<'_> {
        self.weighted_delta(1.0)
    }

    /// This expert's update with its coefficient multiplied by `w`.
    pub fn weighted_delta(&self, w: f64) -> FfnDelta<'_> {
        let coef = w * self.scale();
        FfnDelta {
            down: vec![LowRankTerm {
                a: &self.a_down,
                b: &self.b_down,
                coef,
            }],
            up: vec![LowRankTerm {
                a: &self.a_up,
                b: &self.b_up,
                coef,
            }],
        }
    }

    pub fn param_count(&self) -> usize {
        self.a_down.numel() + self.b_down.numel() + self.a_up.numel() + self.b_up.numel()
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
}

/// Dense weights `W + (α/r)·A·B` for both projections.
pub fn lora_materialise(shared: &FfnParams, expert: &LoraExpert) -> Result<FfnParams> {
    let s = expert.scale();
    let fold = |w: &Tensor, a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let ab = a.matmul(b)?;
        let mut out = w.zip_map(&ab, |x, y| x + s * y)?;
        out.requires_grad = w.requires_grad;
        Ok(out)
    };
    Ok(FfnParams {
        w_down: fold(&shared.w_down, &expert.a_down, &expert.b_down)?,
        w_gate: shared.w_gate.clone(),
        w_up: fold(&shared.w_up, &expert.a_up, &expert.b_up)?,
    })
}

/// The conditional part of a MoL layer; the shared FFN belongs to the group's block.
#[derive(Clone, Debug, PartialEq)]
pub struct MolLayer {
    pub experts: Vec<LoraExpert>,
    pub router: Router,
}

impl MolLayer {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        f: usize,
        n_experts: usize,
        top_k: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let router = Router::zeros(d, n_experts, top_k)?;
        let experts = (0..n_experts)
            .map(|_| LoraExpert::init(d, f, rank, alpha, rng))
            .collect::<Result<_>>()?;
        Ok(MolLayer { experts, router })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    fn validate(&self, shared: &FfnParams) -> Result<()> {
        if self.experts.len() != self.router.n_experts() {
            return Err(Error::Config(format!(
                "{} experts but the router has {} outputs",
                self.experts.len(),
                self.router.n_experts()
            )));
        }
        let (d, f) = (shared.d_model(), shared.d_ff());
        for e in &self.experts {
            if e.rank != self.experts[0].rank || e.alpha != self.experts[0].alpha {
                return Err(Error::Config("experts must share rank and alpha".into()));
            }
            if e.a_down.shape() != [d, e.rank] || e.b_down.shape() != [e.rank, f] {
                return Err(Error::Dimension(format!(
                    "expert factors {} x {} do not fit w_down [{d}, {f}]",
                    shape_str(e.a_down.shape()),
                    shape_str(e.b_down.shape())
                )));
            }
        }
        Ok(())
    }
}

/// Routing decisions made inside one conditional layer during a forward pass.
#[derive(Clone, Debug)]
pub struct RoutingRecord {
    /// 1-based group index.
    pub group: usize,
    /// `[n, E]` router probabilities (on the tape, so auxiliary losses can use them).
    pub probs: Var,
    /// Selected experts per token; empty when the layer only records statistics.
    pub selections: Vec<Vec<usize>>,
}

fn route_on_tape(tape: &mut Tape, x: Var, router: &Router) -> Result<(Var, Vec<Vec<usize>>)> {
    let w = tape.param(&router.weight);
    let logits = tape.matmul(x, w)?;
    let probs = tape.softmax(logits)?;
    let pv = tape.value(probs);
    let selections: Vec<Vec<usize>> = (0..pv.rows())
        .map(|t| topk_indices(pv.row(t), router.top_k))
        .collect();
    count_routed(selections.len());
    Ok((probs, selections))
}

/// Runs `expert(e, rows)` for each expert on the tokens routed to it and sums
/// the gate-weighted results back into an `[n, d_out]` tensor.
fn dispatch(
    tape: &mut Tape,
    n: usize,
    n_experts: usize,
    gate: Var,
    selections: &[Vec<usize>],
    mut expert: impl FnMut(&mut Tape, usize, &[usize]) -> Result<Var>,
) -> Result<Option<Var>> {
    let mut out: Option<Var> = None;
    for e in 0..n_experts {
        let rows: Vec<usize> = (0..n).filter(|&t| selections[t].contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        let y = expert(tape, e, &rows)?;
        let idx: Vec<(usize, usize)> = rows.iter().map(|&t| (t, e)).collect();
        let w = tape.gather_elems(gate, &idx)?;
        let y = tape.scale_rows(y, w)?;
        let y = tape.scatter_rows(y, &rows, n)?;
        out = Some(match out {
            Some(acc) => tape.add(acc, y)?,
            None => y,
        });
    }
    Ok(out)
}

/// MoL over normalised hidden states `x: [n, d]` already on the tape.
pub fn mol_tape(
    tape: &mut Tape,
    x: Var,
    shared: &FfnParams,
    layer: &MolLayer,
    group: usize,
) -> Result<(Var, RoutingRecord)> {
    layer.validate(shared)?;
    let n = tape.value(x).rows();
    let (probs, selections) = route_on_tape(tape, x, &layer.router)?;
    let gate = tape.topk_gate(probs, &selections)?;
    let out = dispatch(tape, n, layer.n_experts(), gate, &selections, |tape, e, rows| {
        let xe = tape.gather_rows(x, rows)?;
        ffn_tape(tape, xe, shared, Some(&layer.experts[e].delta()))
    })?
    .expect("every token selects at least one expert");
    Ok((
        out,
        RoutingRecord {
            group,
            probs,
            selections,
        },
    ))
}

pub fn mol_forward(h: &Tensor, shared: &FfnParams, layer: &MolLayer) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let (y, _) = mol_tape(&mut tape, x, shared, layer, 0)?;
    Ok(tape.value(y).clone())
}

/// Bottleneck adapter `a(y) = GELU(y·down)·up`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    /// `[d, b]`
    pub down: Tensor,
    /// `[b, d]`
    pub up: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoaLayer {
    pub adapters: Vec<Adapter>,
    pub router: Router,
}

/// Adapter width giving a MoA expert the same parameter count as a rank-`r`
/// LoRA expert on a `[d, f]` FFN: `2·d·b ≈ 2·r·(d + f)`.
pub fn moa_bottleneck(d: usize, f: usize, rank: usize) -> usize {
    ((rank * (d + f)) as f64 / d as f64).round().max(1.0) as usize
}

impl MoaLayer {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        bottleneck: usize,
        n_experts: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let router = Router::zeros(d, n_experts, top_k)?;
        let adapters = (0..n_experts)
            .map(|_| Adapter {
                down: Tensor::randn(&[d, bottleneck], LORA_INIT_STD, rng).with_grad(true),
                up: Tensor::zeros(&[bottleneck, d]).with_grad(true),
            })
            .collect();
        Ok(MoaLayer { adapters, router })
    }

    pub fn n_experts(&self) -> usize {
        self.adapters.len()
    }
}

/// `y = FFN(x)`, output `y + Σ p̂_i · adapter_i(y)`.
pub fn moa_tape(
    tape: &mut Tape,
    x: Var,
    shared: &FfnParams,
    layer: &MoaLayer,
    group: usize,
) -> Result<(Var, RoutingRecord)> {
    if layer.adapters.len() != layer.router.n_experts() {
        return Err(Error::Config(format!(
            "{} adapters but the router has {} outputs",
            layer.adapters.len(),
            layer.router.n_experts()
        )));
    }
    let n = tape.value(x).rows();
    let y = ffn_tape(tape, x, shared, None)?;
    let (probs, selections) = route_on_tape(tape, x, &layer.router)?;
    let gate = tape.topk_gate(probs, &selections)?;
    let mixed = dispatch(tape, n, layer.n_experts(), gate, &selections, |tape, e, rows| {
        let ad = &layer.adapters[e];
        let ye = tape.gather_rows(y, rows)?;
        let down = tape.param(&ad.down);
        let up = tape.param(&ad.up);
        let z = tape.matmul(ye, down)?;
        let z = tape.gelu(z);
        tape.matmul(z, up)
    })?
    .expect("every token selects at least one adapter");
    let out = tape.add(y, mixed)?;
    Ok((
        out,
        RoutingRecord {
            group,
            probs,
            selections,
        },
    ))
}

pub fn moa_forward(h: &Tensor, shared: &FfnParams, layer: &MoaLayer) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let (y, _) = moa_tape(&mut tape, x, shared, layer, 0)?;
    Ok(tape.value(y).clone())
}

/// `E · Σ_i f_i · P_i` with `f` the hard routing fractions and `P` the mean
/// router probabilities. Equals 1 under perfectly balanced routing.
pub fn load_balance_loss(router_probs: &Tensor, selections: &[Vec<usize>]) -> Result<f64> {
    if router_probs.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "load_balance_loss expects [tokens, E], got {}",
            shape_str(router_probs.shape())
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(router_probs.clone());
    let l = tape.load_balance(p, selections)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ffn_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probs_router(p: &[f64], top_k: usize) -> (Tensor, Router) {
        // One-hot input picks row 0 of the router, whose logits are ln p.
        let e = p.len();
        let mut w = Tensor::zeros(&[2, e]);
        for (i, &v) in p.iter().enumerate() {
            w.data_mut()[i] = v.ln();
        }
        let router = Router {
            weight: w,
            top_k,
            frozen: false,
        };
        (Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(), router)
    }

    #[test]
    fn route_topk_renormalises_selected_mass() {
        let (h, r) = probs_router(&[0.5, 0.3, 0.2], 2);
        let routing = route_topk(&h, &r).unwrap();
        assert_eq!(routing.indices, vec![0, 1]);
        assert!((routing.weights[0] - 0.625).abs() < 1e-15);
        assert!((routing.weights[1] - 0.375).abs() < 1e-15);
    }

    #[test]
    fn top1_weight_is_exactly_one() {
        let (h, r) = probs_router(&[0.2, 0.7, 0.1], 1);
        let routing = route_topk(&h, &r).unwrap();
        assert_eq!(routing.indices, vec![1]);
        assert_eq!(routing.weights, vec![1.0]);
    }

    #[test]
    fn full_k_reproduces_the_distribution() {
        let (h, r) = probs_router(&[0.1, 0.6, 0.3], 3);
        let p = r.probs(&h.reshape(&[1, 2]).unwrap()).unwrap();
        let routing = route_topk(&h, &r).unwrap();
        for (&i, &w) in routing.indices.iter().zip(&routing.weights) {
            assert!((w - p.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        assert_eq!(topk_indices(&[0.25; 4], 2), vec![0, 1]);
        assert_eq!(topk_indices(&[0.1, 0.3, 0.3, 0.3], 2), vec![1, 2]);
    }

    #[test]
    fn router_rejects_bad_top_k() {
        assert!(Router::zeros(4, 2, 3).is_err());
        assert!(Router::zeros(4, 2, 0).is_err());
    }

    #[test]
    fn lora_rank_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LoraExpert::init(32, 64, 8, 16.0, &mut rng).is_ok());
        assert!(LoraExpert::init(32, 64, 9, 16.0, &mut rng).is_err());
        assert!(LoraExpert::init(32, 64, 0, 16.0, &mut rng).is_err());
    }

    #[test]
    fn materialise_zero_a_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shared = FfnParams::init(8, 16, true, 0.3, &mut rng);
        let mut e = LoraExpert::init(8, 16, 2, 4.0, &mut rng).unwrap();
        e.a_down = Tensor::zeros(&[8, 2]);
        e.a_up = Tensor::zeros(&[16, 2]);
        e.b_down = Tensor::randn(&[2, 16], 1.0, &mut rng);
        e.b_up = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let m = lora_materialise(&shared, &e).unwrap();
        assert_eq!(m.w_down.data(), shared.w_down.data());
        assert_eq!(m.w_up.data(), shared.w_up.data());
    }

    #[test]
    fn materialise_rank_one_unit_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shared = FfnParams::init(4, 8, false, 0.3, &mut rng);
        let mut e = LoraExpert::init(4, 8, 1, 1.0, &mut rng).unwrap();
        e.a_down = Tensor::from_fn(&[4, 1], |i| (i == 0) as u8 as f64);
        e.b_down = Tensor::from_fn(&[1, 8], |i| (i == 0) as u8 as f64);
        e.a_up = Tensor::zeros(&[8, 1]);
        let m = lora_materialise(&shared, &e).unwrap();
        let mut expected = shared.w_down.clone();
        expected.data_mut()[0] += 1.0;
        assert_eq!(m.w_down.data(), expected.data());
        assert_eq!(m.w_up.data(), shared.w_up.data());
    }

    #[test]
    fn zero_a_experts_reduce_mol_to_the_shared_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shared = FfnParams::init(8, 32, true, 0.3, &mut rng);
        let mut layer = MolLayer::init(8, 32, 4, 2, 2, 4.0, &mut rng).unwrap();
        layer.router.weight = Tensor::randn(&[8, 4], 1.0, &mut rng);
        for e in &mut layer.experts {
            e.a_down = Tensor::zeros(e.a_down.shape());
            e.a_up = Tensor::zeros(e.a_up.shape());
            e.b_down = Tensor::randn(e.b_down.shape(), 1.0, &mut rng);
            e.b_up = Tensor::randn(e.b_up.shape(), 1.0, &mut rng);
        }
        let h = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let y = mol_forward(&h, &shared, &layer).unwrap();
        let dense = ffn_forward(&h, &shared, None).unwrap();
        assert!(y.max_abs_diff(&dense) <= 1e-12);
    }

    #[test]
    fn zero_adapter_up_projection_reduces_moa_to_the_shared_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shared = FfnParams::init(8, 32, true, 0.3, &mut rng);
        let mut layer = MoaLayer::init(8, 4, 4, 2, &mut rng).unwrap();
        layer.router.weight = Tensor::randn(&[8, 4], 1.0, &mut rng);
        let h = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let y = moa_forward(&h, &shared, &layer).unwrap();
        assert_eq!(y, ffn_forward(&h, &shared, None).unwrap());
    }

    #[test]
    fn moa_and_mol_budgets_match() {
        let (d, f, r, e) = (64, 128, 8, 8);
        let b = moa_bottleneck(d, f, r);
        let mol = e * 2 * r * (d + f) + d * e;
        let moa = e * 2 * d * b + d * e;
        let rel = (mol as f64 - moa as f64).abs() / mol as f64;
        assert!(rel < 0.05, "mol {mol} moa {moa}");
    }

    #[test]
    fn load_balance_extremes() {
        let uniform = Tensor::full(&[4, 4], 0.25);
        let sel: Vec<Vec<usize>> = (0..4).map(|t| vec![t]).collect();
        assert!((load_balance_loss(&uniform, &sel).unwrap() - 1.0).abs() < 1e-15);
        let collapsed = Tensor::from_fn(&[5, 4], |i| (i % 4 == 0) as u8 as f64);
        let sel = vec![vec![0]; 5];
        assert!((load_balance_loss(&collapsed, &sel).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn routing_counter_counts_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shared = FfnParams::init(8, 32, false, 0.3, &mut rng);
        let layer = MolLayer::init(8, 32, 2, 1, 2, 4.0, &mut rng).unwrap();
        let before = routed_token_count();
        mol_forward(&Tensor::randn(&[7, 8], 1.0, &mut rng), &shared, &layer).unwrap();
        assert_eq!(routed_token_count() - before, 7);
    }
}
