//! Transformer building blocks: pre-norm layer normalisation, rotary
//! multi-head attention and the (Ge)GLU feed-forward network.
//!
//! Projections use the row convention `y = x·W` with `W: [d_in, d_out]` and no
//! bias terms. The tape versions (`*_tape`) are what the model runs; the
//! tensor-in/tensor-out wrappers exist for direct evaluation and tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{attention_kernel, layer_norm_kernel, rope_kernel, Tape, Var};
use crate::error::{shape_str, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(d: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer norm epsilon must be > 0, got {eps}")));
        }
        Ok(LayerNormParams {
            gain: Tensor::ones(&[d]).with_grad(true),
            bias: Tensor::zeros(&[d]).with_grad(true),
            eps,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub n_heads: usize,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(d: usize, n_heads: usize, std: f64, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {d} is not divisible by {n_heads} heads"
            )));
        }
        let mut mk = || Tensor::randn(&[d, d], std, rng).with_grad(true);
        Ok(AttentionParams {
            wq: mk(),
            wk: mk(),
            wv: mk(),
            wo: mk(),
            n_heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.n_heads
    }
}

/// Feed-forward weights. `w_down: [d, f]` is the first projection and
/// expands the width despite its name; `w_up: [f, d]` projects back.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub w_down: Tensor,
    /// GeGLU gate, `[d, f]`; `None` runs the plain two-matrix form.
    pub w_gate: Option<Tensor>,
    pub w_up: Tensor,
}

impl FfnParams {
    pub fn init<R: Rng + ?Sized>(d: usize, f: usize, geglu: bool, std: f64, rng: &mut R) -> Self {
        let w_down = Tensor::randn(&[d, f], std, rng).with_grad(true);
        let w_gate = geglu.then(|| Tensor::randn(&[d, f], std, rng).with_grad(true));
        let w_up = Tensor::randn(&[f, d], std, rng).with_grad(true);
        FfnParams {
            w_down,
            w_gate,
            w_up,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_down.shape()[0]
    }

    pub fn d_ff(&self) -> usize {
        self.w_down.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    pub head_dim: usize,
    pub max_seq: usize,
}

impl RopeConfig {
    pub fn new(base: f64, head_dim: usize, max_seq: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head dim, got {head_dim}"
            )));
        }
        if !(base > 0.0) {
            return Err(Error::Config(format!("rope base must be > 0, got {base}")));
        }
        Ok(RopeConfig {
            base,
            head_dim,
            max_seq,
        })
    }
}

/// How packed rows map onto sequences: `positions[r]` is row `r`'s position in
/// its sequence and `key_mask[r] == false` marks padding.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqLayout {
    pub seq_len: usize,
    pub positions: Vec<usize>,
    pub key_mask: Option<Vec<bool>>,
}

impl SeqLayout {
    /// `batch` unpadded sequences of `seq_len` tokens.
    pub fn dense(batch: usize, seq_len: usize) -> Self {
        SeqLayout {
            seq_len,
            positions: (0..batch).flat_map(|_| 0..seq_len).collect(),
            key_mask: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }
}

/// One additive low-rank term `coef · A·B` on a projection.
#[derive(Clone, Copy, Debug)]
pub struct LowRankTerm<'a> {
    pub a: &'a Tensor,
    pub b: &'a Tensor,
    pub coef: f64,
}

/// Low-rank updates applied to `w_down` and `w_up`; the gate never carries one.
#[derive(Clone, Debug, Default)]
pub struct FfnDelta<'a> {
    pub down: Vec<LowRankTerm<'a>>,
    pub up: Vec<LowRankTerm<'a>>,
}

impl<'a> FfnDelta<'a> {
    pub fn is_empty(&self) -> bool {
        self.down.is_empty() && self.up.is_empty()
    }
}

pub fn layer_norm_tape(tape: &mut Tape, x: Var, p: &LayerNormParams) -> Result<Var> {
    let g = tape.param(&p.gain);
    let b = tape.param(&p.bias);
    tape.layer_norm(x, g, b, p.eps)
}

/// `x·W + Σ coef·(x·A)·B`
fn project(tape: &mut Tape, x: Var, w: &Tensor, terms: &[LowRankTerm<'_>]) -> Result<Var> {
    let wv = tape.param(w);
    let mut y = tape.matmul(x, wv)?;
    for t in terms {
        let (din, dout) = w.dims2()?;
        let (ar, ac) = t.a.dims2()?;
        let (br, bc) = t.b.dims2()?;
        if ar != din || bc != dout || ac != br {
            return Err(Error::Dimension(format!(
                "low-rank update {} x {} does not fit weight {}",
                shape_str(t.a.shape()),
                shape_str(t.b.shape()),
                shape_str(w.shape())
            )));
        }
        let a = tape.param(t.a);
        let b = tape.param(t.b);
        let xa = tape.matmul(x, a)?;
        let xab = tape.matmul(xa, b)?;
        let scaled = tape.scale(xab, t.coef);
        y = tape.add(y, scaled)?;
    }
    Ok(y)
}

pub fn ffn_tape(tape: &mut Tape, x: Var, p: &FfnParams, delta: Option<&FfnDelta<'_>>) -> Result<Var> {
    let empty = FfnDelta::default();
    let delta = delta.unwrap_or(&empty);
    let value = project(tape, x, &p.w_down, &delta.down)?;
    let hidden = match &p.w_gate {
        Some(w_gate) => {
            let wg = tape.param(w_gate);
            let gate = tape.matmul(x, wg)?;
            let gate = tape.gelu(gate);
            tape.mul(gate, value)?
        }
        None => tape.gelu(value),
    };
    project(tape, hidden, &p.w_up, &delta.up)
}

pub fn attention_tape(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams,
    rope: &RopeConfig,
    layout: &SeqLayout,
) -> Result<Var> {
    if let Some(&bad) = layout.positions.iter().find(|&&pos| pos >= rope.max_seq) {
        return Err(Error::Input(format!(
            "position {bad} exceeds max sequence length {}",
            rope.max_seq
        )));
    }
    if p.head_dim() != rope.head_dim {
        return Err(Error::Config(format!(
            "rope head dim {} does not match attention head dim {}",
            rope.head_dim,
            p.head_dim()
        )));
    }
    let wq = tape.param(&p.wq);
    let wk = tape.param(&p.wk);
    let wv = tape.param(&p.wv);
    let wo = tape.param(&p.wo);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let q = tape.rope(q, &layout.positions, p.n_heads, rope.base)?;
    let k = tape.rope(k, &layout.positions, p.n_heads, rope.base)?;
    let ctx = tape.attention(
        q,
        k,
        v,
        layout.seq_len,
        p.n_heads,
        layout.key_mask.as_deref(),
    )?;
    tape.matmul(ctx, wo)
}

/// Weights of one shared group: θ (attention + its norm) and φ (FFN + its norm).
#[derive(Clone, Debug, PartialEq)]
pub struct SharedBlockParams {
    pub attn_norm: LayerNormParams,
    pub attn: AttentionParams,
    pub ffn_norm: LayerNormParams,
    pub ffn: FfnParams,
}

impl SharedBlockParams {
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            (format!("{prefix}.attn_norm.gain"), &self.attn_norm.gain),
            (format!("{prefix}.attn_norm.bias"), &self.attn_norm.bias),
            (format!("{prefix}.attn.wq"), &self.attn.wq),
            (format!("{prefix}.attn.wk"), &self.attn.wk),
            (format!("{prefix}.attn.wv"), &self.attn.wv),
            (format!("{prefix}.attn.wo"), &self.attn.wo),
            (format!("{prefix}.ffn_norm.gain"), &self.ffn_norm.gain),
            (format!("{prefix}.ffn_norm.bias"), &self.ffn_norm.bias),
            (format!("{prefix}.ffn.w_down"), &self.ffn.w_down),
        ];
        if let Some(g) = &self.ffn.w_gate {
            out.push((format!("{prefix}.ffn.w_gate"), g));
        }
        out.push((format!("{prefix}.ffn.w_up"), &self.ffn.w_up));
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            (format!("{prefix}.attn_norm.gain"), &mut self.attn_norm.gain),
            (format!("{prefix}.attn_norm.bias"), &mut self.attn_norm.bias),
            (format!("{prefix}.attn.wq"), &mut self.attn.wq),
            (format!("{prefix}.attn.wk"), &mut self.attn.wk),
            (format!("{prefix}.attn.wv"), &mut self.attn.wv),
            (format!("{prefix}.attn.wo"), &mut self.attn.wo),
            (format!("{prefix}.ffn_norm.gain"), &mut self.ffn_norm.gain),
            (format!("{prefix}.ffn_norm.bias"), &mut self.ffn_norm.bias),
            (format!("{prefix}.ffn.w_down"), &mut self.ffn.w_down),
        ];
        if let Some(g) = &mut self.ffn.w_gate {
            out.push((format!("{prefix}.ffn.w_gate"), g));
        }
        out.push((format!("{prefix}.ffn.w_up"), &mut self.ffn.w_up));
        out
    }
}

/// `h + MHA(LN(h))`
pub fn attention_sublayer_tape(
    tape: &mut Tape,
    h: Var,
    block: &SharedBlockParams,
    rope: &RopeConfig,
    layout: &SeqLayout,
) -> Result<Var> {
    let x = layer_norm_tape(tape, h, &block.attn_norm)?;
    let a = attention_tape(tape, x, &block.attn, rope, layout)?;
    tape.add(h, a)
}

/// Ψ: residual pre-norm attention followed by a residual pre-norm FFN.
pub fn encoder_layer_tape(
    tape: &mut Tape,
    h: Var,
    block: &SharedBlockParams,
    rope: &RopeConfig,
    layout: &SeqLayout,
) -> Result<Var> {
    let h_att = attention_sublayer_tape(tape, h, block, rope, layout)?;
    let x = layer_norm_tape(tape, h_att, &block.ffn_norm)?;
    let f = ffn_tape(tape, x, &block.ffn, None)?;
    tape.add(h_att, f)
}

// ---- direct evaluation -------------------------------------------------

pub fn layer_norm(x: &Tensor, p: &LayerNormParams) -> Result<Tensor> {
    let d = x.last_dim();
    if p.gain.shape() != [d] || p.bias.shape() != [d] {
        return Err(Error::Dimension(format!(
            "layer_norm: input {} with params of width {}",
            shape_str(x.shape()),
            p.gain.numel()
        )));
    }
    Ok(layer_norm_kernel(x, p.gain.data(), p.bias.data(), p.eps).0)
}

/// Rotates `x: [seq, n_heads, head_dim]`; `positions[i]` belongs to row `i`.
pub fn rope_rotate(x: &Tensor, positions: &[usize], cfg: &RopeConfig) -> Result<Tensor> {
    let [seq, n_heads, hd] = x.shape()[..] else {
        return Err(Error::Dimension(format!(
            "rope_rotate expects [seq, heads, head_dim], got {}",
            shape_str(x.shape())
        )));
    };
    if hd != cfg.head_dim {
        return Err(Error::Dimension(format!(
            "rope_rotate: head dim {hd} but config says {}",
            cfg.head_dim
        )));
    }
    if positions.len() != seq {
        return Err(Error::Dimension(format!(
            "rope_rotate: {} positions for {seq} rows",
            positions.len()
        )));
    }
    if let Some(&bad) = positions.iter().find(|&&p| p >= cfg.max_seq) {
        return Err(Error::Input(format!(
            "position {bad} exceeds max sequence length {}",
            cfg.max_seq
        )));
    }
    let mut flat = x.reshape(&[seq, n_heads * hd])?;
    rope_kernel(&mut flat, positions, n_heads, cfg.base, false);
    flat.reshape(x.shape())
}

/// Output of direct attention evaluation.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Tensor,
    /// `[n_heads, seq, seq]` probabilities.
    pub weights: Tensor,
}

/// Attention over one sequence `x: [seq, d]`. `mask[j] == false` hides key `j`.
pub fn attention(
    x: &Tensor,
    p: &AttentionParams,
    cfg: &RopeConfig,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let (seq, _) = x.dims2()?;
    if let Some(m) = mask {
        if m.len() != seq {
            return Err(Error::Dimension(format!(
                "attention mask of length {} for sequence of {seq}",
                m.len()
            )));
        }
    }
    let layout = SeqLayout {
        seq_len: seq,
        positions: (0..seq).collect(),
        key_mask: mask.map(|m| m.to_vec()),
    };
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = attention_tape(&mut tape, xv, p, cfg, &layout)?;
    // Recompute the probabilities from the rotated projections for inspection.
    let q = rope_rows(&x.matmul(&p.wq)?, p.n_heads, cfg)?;
    let k = rope_rows(&x.matmul(&p.wk)?, p.n_heads, cfg)?;
    let v = x.matmul(&p.wv)?;
    let (_, probs) = attention_kernel(&q, &k, &v, seq, p.n_heads, mask)?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        weights: Tensor::new(vec![p.n_heads, seq, seq], probs)?,
    })
}

fn rope_rows(x: &Tensor, n_heads: usize, cfg: &RopeConfig) -> Result<Tensor> {
    let (seq, _) = x.dims2()?;
    let mut out = x.clone();
    let positions: Vec<usize> = (0..seq).collect();
    rope_kernel(&mut out, &positions, n_heads, cfg.base, false);
    Ok(out)
}

pub fn ffn_forward(h: &Tensor, p: &FfnParams, delta: Option<&FfnDelta<'_>>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(h.clone());
    let y = ffn_tape(&mut tape, x, p, delta)?;
    Ok(tape.value(y).clone())
}

pub fn encoder_layer_forward(
    h_prev: &Tensor,
    block: &SharedBlockParams,
    rope: &RopeConfig,
) -> Result<Tensor> {
    let (seq, _) = h_prev.dims2()?;
    let layout = SeqLayout::dense(1, seq);
    let mut tape = Tape::new();
    let h = tape.constant(h_prev.clone());
    let y = encoder_layer_tape(&mut tape, h, block, rope, &layout)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(d: usize, f: usize, heads: usize, geglu: bool, seed: u64) -> SharedBlockParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SharedBlockParams {
            attn_norm: LayerNormParams::new(d, DEFAULT_LN_EPS).unwrap(),
            attn: AttentionParams::init(d, heads, 0.3, &mut rng).unwrap(),
            ffn_norm: LayerNormParams::new(d, DEFAULT_LN_EPS).unwrap(),
            ffn: FfnParams::init(d, f, geglu, 0.3, &mut rng),
        }
    }

    #[test]
    fn layer_norm_examples() {
        let p = LayerNormParams::new(3, 1e-300).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, &p).unwrap();
        let expected = 1.5f64.sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - expected).abs() < 1e-12);

        let c = Tensor::full(&[4], 7.5);
        let y = layer_norm(&c, &LayerNormParams::new(4, 1e-5).unwrap()).unwrap();
        assert!(y.max_abs() < 1e-12);

        let mut p = LayerNormParams::new(3, 1e-5).unwrap();
        p.gain = Tensor::zeros(&[3]);
        p.bias = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(layer_norm(&x, &p).unwrap(), p.bias);
    }

    #[test]
    fn epsilon_must_be_positive() {
        assert!(LayerNormParams::new(4, 0.0).is_err());
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        assert!(matches!(RopeConfig::new(10000.0, 5, 8), Err(Error::Config(_))));
    }

    #[test]
    fn rope_position_zero_is_identity_and_norms_are_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = RopeConfig::new(10000.0, 8, 64).unwrap();
        let x = Tensor::randn(&[5, 2, 8], 1.0, &mut rng);
        let y = rope_rotate(&x, &[0, 0, 0, 0, 0], &cfg).unwrap();
        assert_eq!(x, y);
        let y = rope_rotate(&x, &[0, 3, 17, 40, 63], &cfg).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = a[0].hypot(a[1]);
            let nb = b[0].hypot(b[1]);
            assert!((na - nb).abs() <= 1e-12);
        }
        assert!(rope_rotate(&x, &[0, 1, 2, 3, 64], &cfg).is_err());
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::init(8, 2, 0.5, &mut rng).unwrap();
        let cfg = RopeConfig::new(10000.0, 4, 16).unwrap();
        let x = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let out = attention(&x, &p, &cfg, None).unwrap();
        assert!(out.weights.data().iter().all(|&w| w == 1.0));
        let expected = x.matmul(&p.wv).unwrap().matmul(&p.wo).unwrap();
        assert!(out.output.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_is_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::init(8, 2, 0.5, &mut rng).unwrap();
        let cfg = RopeConfig::new(10000.0, 4, 16).unwrap();
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mask = [true, true, false, true, false];
        let out = attention(&x, &p, &cfg, Some(&mask)).unwrap();
        for row in out.weights.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert_eq!(row[2], 0.0);
            assert_eq!(row[4], 0.0);
        }
        assert!(attention(&x, &p, &cfg, Some(&mask[..3])).is_err());
    }

    #[test]
    fn zero_up_projection_gives_zero_ffn() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = FfnParams::init(6, 12, true, 0.5, &mut rng);
        p.w_up = Tensor::zeros(&[12, 6]);
        let h = Tensor::randn(&[3, 6], 1.0, &mut rng);
        assert_eq!(ffn_forward(&h, &p, None).unwrap(), Tensor::zeros(&[3, 6]));
    }

    #[test]
    fn zero_a_delta_equals_no_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = FfnParams::init(6, 12, true, 0.5, &mut rng);
        let h = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let (a1, b1) = (Tensor::zeros(&[6, 2]), Tensor::randn(&[2, 12], 1.0, &mut rng));
        let (a2, b2) = (Tensor::zeros(&[12, 2]), Tensor::randn(&[2, 6], 1.0, &mut rng));
        let delta = FfnDelta {
            down: vec![LowRankTerm { a: &a1, b: &b1, coef: 2.0 }],
            up: vec![LowRankTerm { a: &a2, b: &b2, coef: 2.0 }],
        };
        assert_eq!(
            ffn_forward(&h, &p, Some(&delta)).unwrap(),
            ffn_forward(&h, &p, None).unwrap()
        );
    }

    #[test]
    fn mismatched_delta_is_a_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = FfnParams::init(6, 12, false, 0.5, &mut rng);
        let h = Tensor::randn(&[3, 6], 1.0, &mut rng);
        let (a, b) = (Tensor::zeros(&[5, 2]), Tensor::zeros(&[2, 12]));
        let delta = FfnDelta {
            down: vec![LowRankTerm { a: &a, b: &b, coef: 1.0 }],
            up: vec![],
        };
        assert!(matches!(ffn_forward(&h, &p, Some(&delta)), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_sublayers_make_the_layer_an_identity() {
        let mut blk = block(8, 16, 2, true, 9);
        blk.attn.wo = Tensor::zeros(&[8, 8]);
        blk.ffn.w_up = Tensor::zeros(&[16, 8]);
        let cfg = RopeConfig::new(10000.0, 4, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = Tensor::randn(&[4, 8], 1.0, &mut rng);
        assert_eq!(encoder_layer_forward(&h, &blk, &cfg).unwrap(), h);
    }

    #[test]
    fn layer_is_pure_and_shape_preserving() {
        let blk = block(8, 16, 2, false, 11);
        let cfg = RopeConfig::new(10000.0, 4, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seq in [1, 3, 7] {
            let h = Tensor::randn(&[seq, 8], 1.0, &mut rng);
            let a = encoder_layer_forward(&h, &blk, &cfg).unwrap();
            let b = encoder_layer_forward(&h, &blk, &cfg).unwrap();
            assert_eq!(a.shape(), h.shape());
            assert_eq!(a, b);
        }
    }
}
