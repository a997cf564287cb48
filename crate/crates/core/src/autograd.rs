//! Reverse-mode differentiation over a linear tape.
//!
//! Operations append nodes in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep. Parameters are
//! bound by identity: binding the same `&Tensor` twice yields the same [`Var`],
//! which is how a weight-tied block accumulates gradient from every application.

use std::collections::HashMap;

use crate::error::{shape_str, Error, Result};
use crate::tensor::{
    ensure_same_shape, gelu_grad_scalar, gelu_scalar, log_softmax_row, matmul, matmul_nt,
    matmul_tn, softmax_in_place, softmax_lastdim, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Row `i` of `x` multiplied by `w[i]`.
    ScaleRows(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        n_heads: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    GatherElems {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    TopKGate {
        probs: Var,
        selections: Vec<Vec<usize>>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<Vec<f64>>,
    },
    Distill {
        student: Var,
        rows: Vec<usize>,
        temperature: f64,
        teacher_probs: Vec<Vec<f64>>,
        student_probs: Vec<Vec<f64>>,
    },
    LoadBalance {
        probs: Var,
        fractions: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    grads: Vec<Option<Tensor>>,
}

fn key(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Binds a parameter. Gradient is tracked iff `t.requires_grad`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key(t)) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, t.requires_grad);
        self.params.insert(key(t), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Multiplies row `i` of `x: [r, m]` by `w[i]` for `w: [r]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.ndim() != 2 || wv.numel() != xv.rows() {
            return Err(Error::Dimension(format!(
                "scale_rows: {} rows scaled by {}",
                shape_str(xv.shape()),
                shape_str(wv.shape())
            )));
        }
        let mut out = xv.clone();
        out.requires_grad = false;
        for (i, &s) in wv.data().iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::ScaleRows(x, w), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_lastdim(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: input {} with gain {} and bias {}",
                shape_str(xv.shape()),
                shape_str(self.value(gain).shape()),
                shape_str(self.value(bias).shape())
            )));
        }
        let (out, xhat, inv_std) =
            layer_norm_kernel(xv, self.value(gain).data(), self.value(bias).data(), eps);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Rotary embedding on `x: [n, n_heads·head_dim]` with one position per row.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let xv = self.value(x);
        check_rope(xv, positions, n_heads)?;
        let mut out = xv.clone();
        out.requires_grad = false;
        rope_kernel(&mut out, positions, n_heads, base, false);
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                n_heads,
                base,
            },
            ng,
        ))
    }

    /// Bidirectional multi-head scaled dot-product attention over packed
    /// sequences: rows `[b·seq_len, (b+1)·seq_len)` form sequence `b`.
    /// `key_mask[r] == false` excludes row `r` as a key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        n_heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (out, probs) = attention_kernel(
            self.value(q),
            self.value(k),
            self.value(v),
            seq_len,
            n_heads,
            key_mask,
        )?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
            },
            ng,
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = tv.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Input("embedding of an empty sequence".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.dims2()?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows: invalid row selection for {}",
                shape_str(xv.shape())
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(vec![rows.len(), m], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Inverse of `gather_rows`: an `[n, m]` tensor with `x[i]` added into row `rows[i]`.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, m) = xv.dims2()?;
        if r != rows.len() || rows.iter().any(|&i| i >= n) {
            return Err(Error::Dimension(format!(
                "scatter_rows: {} rows into {n}",
                shape_str(xv.shape())
            )));
        }
        let mut out = Tensor::zeros(&[n, m]);
        for (i, &dst) in rows.iter().enumerate() {
            for (o, v) in out.row_mut(dst).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// `[x[r0,c0], x[r1,c1], ...]` as a vector.
    pub fn gather_elems(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = xv.dims2()?;
        if idx.is_empty() || idx.iter().any(|&(r, c)| r >= n || c >= m) {
            return Err(Error::Dimension(format!(
                "gather_elems: index out of range for {}",
                shape_str(xv.shape())
            )));
        }
        let data = idx.iter().map(|&(r, c)| xv.data()[r * m + c]).collect();
        let out = Tensor::new(vec![idx.len()], data)?;
        let ng = self.ng(x);
        Ok(self.push(
            out,
            Op::GatherElems {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Dense `[n, E]` gate: selected probabilities renormalised per row, zero elsewhere.
    pub fn topk_gate(&mut self, probs: Var, selections: &[Vec<usize>]) -> Result<Var> {
        let pv = self.value(probs);
        let (n, e) = pv.dims2()?;
        if selections.len() != n || selections.iter().flatten().any(|&i| i >= e) {
            return Err(Error::Dimension(format!(
                "topk_gate: {} selections for probs {}",
                selections.len(),
                shape_str(pv.shape())
            )));
        }
        let out = gate_kernel(pv, selections);
        let ng = self.ng(probs);
        Ok(self.push(
            out,
            Op::TopKGate {
                probs,
                selections: selections.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean cross-entropy over `(row, label)` targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.dims2()?;
        if targets.is_empty() {
            return Err(Error::Usage("cross_entropy with no targets".into()));
        }
        if targets.iter().any(|&(r, l)| r >= n || l >= vocab) {
            return Err(Error::Dimension(format!(
                "cross_entropy: target out of range for logits {}",
                shape_str(lv.shape())
            )));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(targets.len());
        for &(r, l) in targets {
            let lsm = log_softmax_row(lv.row(r));
            loss -= lsm[l];
            probs.push(lsm.iter().map(|v| v.exp()).collect());
        }
        loss /= targets.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// `T²·KL(softmax(teacher/T) ‖ softmax(student/T))` averaged over `rows`.
    /// The teacher enters as a constant.
    pub fn distill_kl(
        &mut self,
        student: Var,
        teacher: &Tensor,
        rows: &[usize],
        temperature: f64,
    ) -> Result<Var> {
        let sv = self.value(student);
        ensure_same_shape(sv, teacher, "distill_kl")?;
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(Error::Config(format!(
                "distillation temperature must be > 0, got {temperature}"
            )));
        }
        if rows.is_empty() {
            return Err(Error::Usage("distill_kl with no rows".into()));
        }
        let t = temperature;
        let mut loss = 0.0;
        let mut teacher_probs = Vec::with_capacity(rows.len());
        let mut student_probs = Vec::with_capacity(rows.len());
        for &r in rows {
            let ls: Vec<f64> = sv.row(r).iter().map(|v| v / t).collect();
            let lt: Vec<f64> = teacher.row(r).iter().map(|v| v / t).collect();
            let ls = log_softmax_row(&ls);
            let lt = log_softmax_row(&lt);
            let pt: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
            loss += pt
                .iter()
                .zip(lt.iter().zip(&ls))
                .map(|(p, (a, b))| if *p > 0.0 { p * (a - b) } else { 0.0 })
                .sum::<f64>();
            teacher_probs.push(pt);
            student_probs.push(ls.iter().map(|v| v.exp()).collect());
        }
        loss *= t * t / rows.len() as f64;
        let ng = self.ng(student);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Distill {
                student,
                rows: rows.to_vec(),
                temperature,
                teacher_probs,
                student_probs,
            },
            ng,
        ))
    }

    /// Switch-style auxiliary loss `E·Σ_i f_i·P_i`; `f` (hard routing
    /// fractions) is a constant, gradient flows through the mean probabilities.
    pub fn load_balance(&mut self, probs: Var, selections: &[Vec<usize>]) -> Result<Var> {
        let pv = self.value(probs);
        let (n, e) = pv.dims2()?;
        if selections.len() != n {
            return Err(Error::Dimension(format!(
                "load_balance: {} selections for probs {}",
                selections.len(),
                shape_str(pv.shape())
            )));
        }
        let fractions = routing_fractions(selections, e);
        let mut mean = vec![0.0; e];
        for t in 0..n {
            for (m, p) in mean.iter_mut().zip(pv.row(t)) {
                *m += p;
            }
        }
        let loss = e as f64
            * fractions
                .iter()
                .zip(&mean)
                .map(|(f, m)| f * m / n as f64)
                .sum::<f64>();
        let ng = self.ng(probs);
        Ok(self.push(Tensor::scalar(loss), Op::LoadBalance { probs, fractions }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {}",
                shape_str(self.value(loss).shape())
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a bound parameter. Trainable tensors never touched by the
    /// computation get zeros; frozen ones get `None`.
    pub fn param_grad(&self, t: &Tensor) -> Option<Tensor> {
        if !t.requires_grad {
            return None;
        }
        let g = self
            .params
            .get(&key(t))
            .and_then(|&v| self.grad(v))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        Some(g)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Temporarily move the op out so inputs can be read while grads are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backprop_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    let ga = matmul_nt(g, self.value(b))?;
                    self.accumulate(a, ga);
                }
                if self.ng(b) {
                    let gb = matmul_tn(self.value(a), g)?;
                    self.accumulate(b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    let ga = matmul(g, self.value(b))?;
                    self.accumulate(a, ga);
                }
                if self.ng(b) {
                    let gb = matmul_tn(g, self.value(a))?;
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.clone());
                self.accumulate(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.ng(a) {
                    let ga = g.zip_map(self.value(b), |x, y| x * y)?;
                    self.accumulate(a, ga);
                }
                if self.ng(b) {
                    let gb = g.zip_map(self.value(a), |x, y| x * y)?;
                    self.accumulate(b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(*a, g.scale(*c)),
            Op::ScaleRows(x, w) => {
                let (x, w) = (*x, *w);
                let wv = self.value(w).clone();
                if self.ng(x) {
                    let mut gx = g.clone();
                    for (r, &s) in wv.data().iter().enumerate() {
                        gx.row_mut(r).iter_mut().for_each(|v| *v *= s);
                    }
                    self.accumulate(x, gx);
                }
                if self.ng(w) {
                    let xv = self.value(x);
                    let gw: Vec<f64> = (0..wv.numel())
                        .map(|r| g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    let gw = Tensor::new(wv.shape().to_vec(), gw)?;
                    self.accumulate(w, gw);
                }
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gv, x| gv * gelu_grad_scalar(x))?;
                self.accumulate(*a, ga);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[i].value;
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (o, (gv, yv)) in ga.row_mut(r).iter_mut().zip(g.row(r).iter().zip(yr)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(*a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.last_dim();
                let rows = g.rows();
                let gain_v = self.value(*gain).data().to_vec();
                if self.ng(*gain) || self.ng(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g.data()[r * d + j] * xhat[r * d + j];
                            gb[j] += g.data()[r * d + j];
                        }
                    }
                    self.accumulate(*gain, Tensor::new(vec![d], gg)?);
                    self.accumulate(*bias, Tensor::new(vec![d], gb)?);
                }
                if self.ng(*x) {
                    let mut gx = Tensor::zeros(g.shape());
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        let dxh: Vec<f64> = gr.iter().zip(&gain_v).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv_std[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(*x, gx);
                }
            }
            Op::Rope {
                x,
                positions,
                n_heads,
                base,
            } => {
                let mut gx = g.clone();
                rope_kernel(&mut gx, positions, *n_heads, *base, true);
                self.accumulate(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                n_heads,
                probs,
            } => {
                let (gq, gk, gv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    g,
                    *seq_len,
                    *n_heads,
                    probs,
                )?;
                self.accumulate(*q, gq);
                self.accumulate(*k, gk);
                self.accumulate(*v, gv);
            }
            Op::Embedding { table, ids } => {
                let shape = self.value(*table).shape().to_vec();
                let mut gt = Tensor::zeros(&shape);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(*table, gt);
            }
            Op::GatherRows { x, rows } => {
                let shape = self.value(*x).shape().to_vec();
                let mut gx = Tensor::zeros(&shape);
                for (r, &src) in rows.iter().enumerate() {
                    for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(*x, gx);
            }
            Op::ScatterRows { x, rows } => {
                let m = g.last_dim();
                let mut data = Vec::with_capacity(rows.len() * m);
                for &r in rows {
                    data.extend_from_slice(g.row(r));
                }
                self.accumulate(*x, Tensor::new(vec![rows.len(), m], data)?);
            }
            Op::GatherElems { x, idx } => {
                let shape = self.value(*x).shape().to_vec();
                let m = shape[1];
                let mut gx = Tensor::zeros(&shape);
                for (gv, &(r, c)) in g.data().iter().zip(idx) {
                    gx.data_mut()[r * m + c] += gv;
                }
                self.accumulate(*x, gx);
            }
            Op::TopKGate { probs, selections } => {
                let pv = self.value(*probs);
                let e = pv.last_dim();
                let mut gp = Tensor::zeros(pv.shape());
                for (t, sel) in selections.iter().enumerate() {
                    let p = pv.row(t);
                    let s: f64 = sel.iter().map(|&j| p[j]).sum();
                    let gr = &g.data()[t * e..(t + 1) * e];
                    let weighted: f64 = sel.iter().map(|&j| gr[j] * p[j]).sum();
                    let row = gp.row_mut(t);
                    for &j in sel {
                        row[j] = gr[j] / s - weighted / (s * s);
                    }
                }
                self.accumulate(*probs, gp);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(*a, Tensor::full(&shape, g.item()));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let mut gl = Tensor::zeros(&shape);
                let scale = g.item() / targets.len() as f64;
                for (&(r, l), p) in targets.iter().zip(probs) {
                    let row = gl.row_mut(r);
                    for (o, pv) in row.iter_mut().zip(p) {
                        *o += scale * pv;
                    }
                    row[l] -= scale;
                }
                self.accumulate(*logits, gl);
            }
            Op::Distill {
                student,
                rows,
                temperature,
                teacher_probs,
                student_probs,
            } => {
                let shape = self.value(*student).shape().to_vec();
                let mut gs = Tensor::zeros(&shape);
                let scale = g.item() * temperature / rows.len() as f64;
                for ((&r, pt), ps) in rows.iter().zip(teacher_probs).zip(student_probs) {
                    for (o, (a, b)) in gs.row_mut(r).iter_mut().zip(ps.iter().zip(pt)) {
                        *o += scale * (a - b);
                    }
                }
                self.accumulate(*student, gs);
            }
            Op::LoadBalance { probs, fractions } => {
                let shape = self.value(*probs).shape().to_vec();
                let (n, e) = (shape[0], shape[1]);
                let c = g.item() * e as f64 / n as f64;
                let mut gp = Tensor::zeros(&shape);
                for t in 0..n {
                    for (o, f) in gp.row_mut(t).iter_mut().zip(fractions) {
                        *o = c * f;
                    }
                }
                self.accumulate(*probs, gp);
            }
        }
        Ok(())
    }
}

/// Fraction of (token, slot) assignments going to each expert; sums to 1.
pub(crate) fn routing_fractions(selections: &[Vec<usize>], e: usize) -> Vec<f64> {
    let mut counts = vec![0.0; e];
    let mut total = 0.0;
    for sel in selections {
        for &j in sel {
            counts[j] += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

pub(crate) fn gate_kernel(probs: &Tensor, selections: &[Vec<usize>]) -> Tensor {
    let mut out = Tensor::zeros(probs.shape());
    for (t, sel) in selections.iter().enumerate() {
        let p = probs.row(t);
        let s: f64 = sel.iter().map(|&j| p[j]).sum();
        let row = out.row_mut(t);
        for &j in sel {
            row[j] = p[j] / s;
        }
    }
    out
}

pub(crate) fn layer_norm_kernel(
    x: &Tensor,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let d = x.last_dim();
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        let orow = out.row_mut(r);
        for j in 0..d {
            let h = (xr[j] - mean) * inv;
            xhat[r * d + j] = h;
            orow[j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

fn check_rope(x: &Tensor, positions: &[usize], n_heads: usize) -> Result<()> {
    let (n, d) = x.dims2()?;
    if positions.len() != n {
        return Err(Error::Dimension(format!(
            "rope: {} positions for {n} rows",
            positions.len()
        )));
    }
    if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
        return Err(Error::Config(format!(
            "rope: width {d} cannot be split into {n_heads} heads of even size"
        )));
    }
    Ok(())
}

/// Rotates each consecutive pair `(2j, 2j+1)` of every head by
/// `position · base^(−2j/head_dim)`; `inverse` rotates by the negated angle.
pub(crate) fn rope_kernel(
    x: &mut Tensor,
    positions: &[usize],
    n_heads: usize,
    base: f64,
    inverse: bool,
) {
    let d = x.last_dim();
    let hd = d / n_heads;
    let inv_freq: Vec<f64> = (0..hd / 2)
        .map(|j| base.powf(-(2.0 * j as f64) / hd as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, &pos) in positions.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let (sin, cos): (Vec<f64>, Vec<f64>) = inv_freq
            .iter()
            .map(|f| (sign * pos as f64 * f).sin_cos())
            .unzip();
        let row = x.row_mut(r);
        for h in 0..n_heads {
            for j in 0..hd / 2 {
                let a = h * hd + 2 * j;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos[j] - x1 * sin[j];
                row[a + 1] = x0 * sin[j] + x1 * cos[j];
            }
        }
    }
}

fn check_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_len: usize,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(usize, usize)> {
    let (n, d) = q.dims2()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Dimension(format!(
            "attention: q {}, k {}, v {}",
            shape_str(q.shape()),
            shape_str(k.shape()),
            shape_str(v.shape())
        )));
    }
    if seq_len == 0 || n % seq_len != 0 {
        return Err(Error::Dimension(format!(
            "attention: {n} rows are not a whole number of sequences of length {seq_len}"
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Config(format!(
            "attention: width {d} not divisible by {n_heads} heads"
        )));
    }
    if let Some(m) = key_mask {
        if m.len() != n {
            return Err(Error::Dimension(format!(
                "attention: mask of length {} for {n} rows",
                m.len()
            )));
        }
    }
    Ok((n, d))
}

/// Returns the attention output and the probabilities laid out `[batch][head][query][key]`.
pub(crate) fn attention_kernel(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    seq_len: usize,
    n_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = check_attention(q, k, v, seq_len, n_heads, key_mask)?;
    let hd = d / n_heads;
    let s = seq_len;
    let scale = 1.0 / (hd as f64).sqrt();
    let batches = n / s;
    let mut probs = vec![0.0; batches * n_heads * s * s];
    let mut out = Tensor::zeros(&[n, d]);
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for b in 0..batches {
        for h in 0..n_heads {
            let c0 = h * hd;
            for i in 0..s {
                let qi = (b * s + i) * d + c0;
                let base = ((b * n_heads + h) * s + i) * s;
                let row = &mut probs[base..base + s];
                let mut any = false;
                for (j, p) in row.iter_mut().enumerate() {
                    let kj = (b * s + j) * d + c0;
                    if key_mask.is_some_and(|m| !m[b * s + j]) {
                        *p = f64::NEG_INFINITY;
                        continue;
                    }
                    any = true;
                    *p = (0..hd).map(|t| qd[qi + t] * kd[kj + t]).sum::<f64>() * scale;
                }
                if !any {
                    row.iter_mut().for_each(|p| *p = 0.0);
                    continue;
                }
                softmax_in_place(row);
                let orow = &mut out.data_mut()[(b * s + i) * d + c0..(b * s + i) * d + c0 + hd];
                for (j, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vj = (b * s + j) * d + c0;
                    for t in 0..hd {
                        orow[t] += p * vd[vj + t];
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    seq_len: usize,
    n_heads: usize,
    probs: &[f64],
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = q.dims2()?;
    let hd = d / n_heads;
    let s = seq_len;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut gq = Tensor::zeros(&[n, d]);
    let mut gk = Tensor::zeros(&[n, d]);
    let mut gv = Tensor::zeros(&[n, d]);
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), g.data());
    let mut dp = vec![0.0; s];
    for b in 0..n / s {
        for h in 0..n_heads {
            let c0 = h * hd;
            for i in 0..s {
                let base = ((b * n_heads + h) * s + i) * s;
                let p = &probs[base..base + s];
                let gi = (b * s + i) * d + c0;
                for j in 0..s {
                    let vj = (b * s + j) * d + c0;
                    dp[j] = (0..hd).map(|t| gd[gi + t] * vd[vj + t]).sum();
                    if p[j] != 0.0 {
                        let gvd = gv.data_mut();
                        for t in 0..hd {
                            gvd[vj + t] += p[j] * gd[gi + t];
                        }
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..s {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * s + j) * d + c0;
                    let qi = gi;
                    for t in 0..hd {
                        gq.data_mut()[qi + t] += ds * kd[kj + t];
                        gk.data_mut()[kj + t] += ds * qd[qi + t];
                    }
                }
            }
        }
    }
    Ok((gq, gk, gv))
}
