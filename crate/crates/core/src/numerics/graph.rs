//! Reverse-mode differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation in execution order. Parameters are
//! bound by reference (no copy in 32-bit mode) and deduplicated by address,
//! so the gradient of a tensor used twice accumulates in one entry. A graph
//! built with [`Graph::no_grad`] keeps values only and is used for inference.

use std::borrow::Cow;
use std::collections::HashMap;
use std::rc::Rc;

use super::mask::AttentionMask;
use super::tensor::{log_softmax_row, matmul_into, softmax_in_place, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Saved sparse attention probabilities: allowed columns per row (shared by
/// all heads) and one probability per (head, allowed entry).
#[derive(Debug)]
struct AttnSaved {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<f64>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        kv_heads: usize,
        saved: AttnSaved,
    },
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GroupMean(Var, usize),
    SoftmaxRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<f64>,
    },
    ReverseKl {
        logits: Var,
        rows: Vec<usize>,
        /// q ⊙ (log q − log p − kl_row) per scored row, the logit gradient.
        dlogits: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        target: Var,
        beta: f64,
        rows: Vec<usize>,
    },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op,
    needs_grad: bool,
}

/// Lower bound applied inside logarithms of the reverse-KL loss.
pub const LOG_FLOOR: f64 = 1e-12;

pub struct Graph<'a, S: Scalar = f32> {
    nodes: Vec<Node<'a, S>>,
    record: bool,
    params: HashMap<*const Tensor<f32>, Var>,
}

impl<'a, S: Scalar> Default for Graph<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Graph<'a, S> {
    /// A recording graph: operations on tensors that require gradients are
    /// kept for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
            params: HashMap::new(),
        }
    }

    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, t: Tensor<S>, op: Op, inputs: &[Var]) -> Var {
        self.push(Cow::Owned(t), op, inputs)
    }

    /// Binds a stored parameter. Gradients flow to it iff the graph records and
    /// `t.requires_grad` is set. Binding the same tensor twice yields one var.
    pub fn param(&mut self, t: &'a Tensor<f32>) -> Var {
        let key = t as *const Tensor<f32>;
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let needs_grad = self.record && t.requires_grad;
        self.nodes.push(Node {
            value: S::lift(t),
            op: Op::Leaf,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(key, v);
        v
    }

    /// Var bound to a parameter earlier with [`Graph::param`], if any.
    pub fn param_var(&self, t: &Tensor<f32>) -> Option<Var> {
        self.params.get(&(t as *const Tensor<f32>)).copied()
    }

    /// Leaf holding an owned tensor; receives gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let needs_grad = self.record && t.requires_grad;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (never receives gradients).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t.with_grad(false))
    }

    pub fn input_rows(&mut self, rows: usize, cols: usize, data: &[f32]) -> Result<Var> {
        let t = Tensor::new(
            vec![rows, cols],
            data.iter().map(|&v| S::of_f64(v as f64)).collect(),
        )?;
        Ok(self.input(t))
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone().with_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_owned(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::Add(a, b), &[a, b]))
    }

    /// `a[i] + b[i mod rows(b)]` row-wise; `b` may be a single row (a bias).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, ca) = (ta.rows(), ta.cols());
        let (rb, cb) = (tb.rows(), tb.cols());
        if ca != cb || rb == 0 || ra % rb != 0 {
            return Err(Error::Dimension(format!(
                "tiled add of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut data = ta.data().to_vec();
        for i in 0..ra {
            let brow = tb.row(i % rb);
            for (o, bv) in data[i * ca..(i + 1) * ca].iter_mut().zip(brow) {
                *o = *o + *bv;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::AddTiled(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Dimension(format!(
                "mul of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let sv = S::of_f64(s);
        let data = ta.data().iter().map(|x| *x * sv).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push_owned(t, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| x / (S::one() + (-x).exp()))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push_owned(t, Op::Silu(a), &[a])
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let (r, c) = (tx.rows(), tx.cols());
        if tg.len() != c {
            return Err(Error::Dimension(format!(
                "rms_norm gain {:?} for input {:?}",
                tg.shape(),
                tx.shape()
            )));
        }
        let mut inv = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = tx.row(i);
            let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / c as f64;
            let iv = 1.0 / (ms + eps).sqrt();
            inv.push(iv);
            data.extend(
                row.iter()
                    .zip(tg.data())
                    .map(|(v, g)| S::of_f64(v.as_f64() * iv) * *g),
            );
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::RmsNorm { x, gain, inv }, &[x, gain]))
    }

    /// Rotary position encoding applied independently to each head chunk of
    /// `head_dim` columns, rotating adjacent pairs.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize, base: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if positions.len() != r || head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 {
            return Err(Error::Dimension(format!(
                "rope on {:?} with {} positions and head_dim {head_dim}",
                tx.shape(),
                positions.len()
            )));
        }
        let mut data = tx.data().to_vec();
        for (i, &pos) in positions.iter().enumerate() {
            for h in 0..c / head_dim {
                for p in 0..head_dim / 2 {
                    let (cos, sin) = rope_angle(pos, p, head_dim, base);
                    let o = i * c + h * head_dim + 2 * p;
                    let (x0, x1) = (data[o].as_f64(), data[o + 1].as_f64());
                    data[o] = S::of_f64(x0 * cos - x1 * sin);
                    data[o + 1] = S::of_f64(x0 * sin + x1 * cos);
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let op = Op::Rope {
            x,
            positions: positions.to_vec(),
            head_dim,
            base,
        };
        Ok(self.push_owned(t, op, &[x]))
    }

    /// Multi-head scaled dot-product attention, `softmax(q·kᵀ/√d + mask)·v`.
    ///
    /// `q` has `heads·d` columns and `k`, `v` have `kv_heads·d`; query head `h`
    /// reads key/value head `h / (heads / kv_heads)`. Masked entries are
    /// skipped, which is the same as adding negative infinity to their scores.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &Rc<AttentionMask>,
        heads: usize,
        kv_heads: usize,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (nq, qc) = (tq.rows(), tq.cols());
        let (nk, kc) = (tk.rows(), tk.cols());
        if heads == 0 || kv_heads == 0 || qc % heads != 0 || heads % kv_heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads / {kv_heads} kv heads do not divide width {qc}"
            )));
        }
        let d = qc / heads;
        if kc != kv_heads * d || tv.cols() != kc || tv.rows() != nk {
            return Err(Error::Dimension(format!(
                "attention q {:?} k {:?} v {:?} with {heads}/{kv_heads} heads",
                tq.shape(),
                tk.shape(),
                tv.shape()
            )));
        }
        if mask.rows() != nq || mask.cols() != nk {
            return Err(Error::Dimension(format!(
                "mask {}x{} for {nq} queries and {nk} keys",
                mask.rows(),
                mask.cols()
            )));
        }
        let keep = self.record
            && (self.nodes[q.0].needs_grad || self.nodes[k.0].needs_grad || self.nodes[v.0].needs_grad);
        let group = heads / kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = vec![S::zero(); nq * qc];
        let mut row_ptr = vec![0usize];
        let mut cols_all: Vec<u32> = Vec::new();
        let mut per_head: Vec<Vec<f64>> = vec![Vec::new(); if keep { heads } else { 0 }];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut acc = vec![0.0f64; d];
        for i in 0..nq {
            let cols = mask.row_cols(i);
            for h in 0..heads {
                let kh = h / group;
                let qrow = &qd[i * qc + h * d..i * qc + (h + 1) * d];
                let mut scores: Vec<f64> = cols
                    .iter()
                    .map(|&j| {
                        let krow = &kd[j * kc + kh * d..j * kc + (kh + 1) * d];
                        let mut s = S::zero();
                        for (a, b) in qrow.iter().zip(krow) {
                            s = s + *a * *b;
                        }
                        s.as_f64() * scale
                    })
                    .collect();
                softmax_in_place(&mut scores).map_err(|_| {
                    Error::Contract(format!("attention row {i} is fully masked"))
                })?;
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (&j, &p) in cols.iter().zip(&scores) {
                    let vrow = &vd[j * kc + kh * d..j * kc + (kh + 1) * d];
                    for (a, vv) in acc.iter_mut().zip(vrow) {
                        *a += p * vv.as_f64();
                    }
                }
                for (o, a) in out[i * qc + h * d..i * qc + (h + 1) * d].iter_mut().zip(&acc) {
                    *o = S::of_f64(*a);
                }
                if keep {
                    per_head[h].extend_from_slice(&scores);
                }
            }
            if keep {
                cols_all.extend(cols.iter().map(|&j| j as u32));
                row_ptr.push(cols_all.len());
            }
        }
        let t = Tensor::new(vec![nq, qc], out)?;
        let saved = AttnSaved {
            row_ptr,
            cols: cols_all,
            probs: per_head.concat(),
        };
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            kv_heads,
            saved,
        };
        Ok(self.push_owned(t, op, &[q, k, v]))
    }

    /// Gathers rows of `src` (embedding lookup, reordering, slicing).
    pub fn select_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let (r, c) = (ts.rows(), ts.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Dimension(format!("row {i} of {:?}", ts.shape())));
            }
            data.extend_from_slice(ts.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push_owned(t, Op::SelectRows(src, idx.to_vec()), &[src]))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.select_rows(src, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims2(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::Dimension(format!(
                    "concat_rows width {} vs {c}",
                    t.cols()
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push_owned(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        if parts.iter().any(|&p| self.dims2(p).0 != r) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push_owned(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if group == 0 || r % group != 0 {
            return Err(Error::Dimension(format!(
                "group_mean of {r} rows in groups of {group}"
            )));
        }
        let mut data = Vec::with_capacity(r / group * c);
        for gi in 0..r / group {
            for j in 0..c {
                let s: f64 = (0..group).map(|k| tx.data()[(gi * group + k) * c + j].as_f64()).sum();
                data.push(S::of_f64(s / group as f64));
            }
        }
        let t = Tensor::new(vec![r / group, c], data)?;
        Ok(self.push_owned(t, Op::GroupMean(x, group), &[x]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(r * c);
        let mut buf = vec![0.0f64; c];
        for i in 0..r {
            for (b, v) in buf.iter_mut().zip(tx.row(i)) {
                *b = v.as_f64();
            }
            softmax_in_place(&mut buf)
                .map_err(|_| Error::Contract(format!("softmax row {i} is fully masked")))?;
            data.extend(buf.iter().map(|&b| S::of_f64(b)));
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push_owned(t, Op::SoftmaxRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        self.push_owned(Tensor::scalar(S::of_f64(s)), Op::Sum(x), &[x])
    }

    /// Mean next-token cross-entropy over the listed rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], rows: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let c = tl.cols();
        if targets.len() != rows.len() || rows.is_empty() {
            return Err(Error::Dimension(format!(
                "cross_entropy with {} targets for {} rows",
                targets.len(),
                rows.len()
            )));
        }
        let mut loss = 0.0;
        let mut probs = Vec::with_capacity(rows.len() * c);
        for (&r, &t) in rows.iter().zip(targets) {
            if r >= tl.rows() || t >= c {
                return Err(Error::Dimension(format!("cross_entropy row {r} target {t}")));
            }
            let lp = log_softmax_row(tl.row(r));
            loss -= lp[t];
            probs.extend(lp.iter().map(|l| l.exp()));
        }
        loss /= rows.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Loss { position: rows[0] });
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            rows: rows.to_vec(),
            probs,
        };
        Ok(self.push_owned(Tensor::scalar(S::of_f64(loss)), op, &[logits]))
    }

    /// Mean over the listed rows of `KL(q || p)` where `q = softmax(logits)`
    /// and `p = softmax(target_logits)`; the target side is never differentiated.
    pub fn reverse_kl(&mut self, logits: Var, target_logits: Var, rows: &[usize]) -> Result<Var> {
        let (tq, tp) = (self.value(logits), self.value(target_logits));
        if tq.cols() != tp.cols() || rows.is_empty() {
            return Err(Error::Dimension(format!(
                "reverse_kl of {:?} against {:?}",
                tq.shape(),
                tp.shape()
            )));
        }
        let floor = LOG_FLOOR.ln();
        let mut total = 0.0;
        let mut dlogits = Vec::with_capacity(rows.len() * tq.cols());
        for &r in rows {
            if r >= tq.rows() || r >= tp.rows() {
                return Err(Error::Dimension(format!("reverse_kl row {r}")));
            }
            let lq: Vec<f64> = log_softmax_row(tq.row(r)).into_iter().map(|v| v.max(floor)).collect();
            let lp: Vec<f64> = log_softmax_row(tp.row(r)).into_iter().map(|v| v.max(floor)).collect();
            let kl: f64 = lq.iter().zip(&lp).map(|(a, b)| a.exp() * (a - b)).sum();
            if !kl.is_finite() {
                return Err(Error::Loss { position: r });
            }
            total += kl;
            dlogits.extend(lq.iter().zip(&lp).map(|(a, b)| a.exp() * ((a - b) - kl)));
        }
        let loss = total / rows.len() as f64;
        let op = Op::ReverseKl {
            logits,
            rows: rows.to_vec(),
            dlogits,
        };
        Ok(self.push_owned(Tensor::scalar(S::of_f64(loss)), op, &[logits]))
    }

    /// Smooth-L1 between `pred` and `target` averaged over every element of
    /// the listed rows; `target` is treated as a constant.
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64, rows: &[usize]) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.cols() != tt.cols() || rows.is_empty() {
            return Err(Error::Dimension(format!(
                "smooth_l1 of {:?} against {:?}",
                tp.shape(),
                tt.shape()
            )));
        }
        let c = tp.cols();
        let mut total = 0.0;
        for &r in rows {
            if r >= tp.rows() || r >= tt.rows() {
                return Err(Error::Dimension(format!("smooth_l1 row {r}")));
            }
            for (a, b) in tp.row(r).iter().zip(tt.row(r)) {
                total += smooth_l1_value(a.as_f64() - b.as_f64(), beta);
            }
            if !total.is_finite() {
                return Err(Error::Loss { position: r });
            }
        }
        let loss = total / (rows.len() * c) as f64;
        let op = Op::SmoothL1 {
            pred,
            target,
            beta,
            rows: rows.to_vec(),
        };
        Ok(self.push_owned(Tensor::scalar(S::of_f64(loss)), op, &[pred]))
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("loss is not on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        let grads = adj
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("adjoint shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs_grad(*a) {
                    let da = self.adj_mut(adj, *a);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            let mut s = S::zero();
                            for (x, y) in grow.iter().zip(brow) {
                                s = s + *x * *y;
                            }
                            da[r * k + p] = da[r * k + p] + s;
                        }
                    }
                }
                if self.needs_grad(*b) {
                    let db = self.adj_mut(adj, *b);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == S::zero() {
                                continue;
                            }
                            for (d, x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d = *d + av * *x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs_grad(v) {
                        let d = self.adj_mut(adj, v);
                        for (x, y) in d.iter_mut().zip(g) {
                            *x = *x + *y;
                        }
                    }
                }
            }
            Op::AddTiled(a, b) => {
                if self.needs_grad(*a) {
                    let d = self.adj_mut(adj, *a);
                    for (x, y) in d.iter_mut().zip(g) {
                        *x = *x + *y;
                    }
                }
                if self.needs_grad(*b) {
                    let tb = self.value(*b);
                    let (rb, c) = (tb.rows(), tb.cols());
                    let d = self.adj_mut(adj, *b);
                    for (r, grow) in g.chunks(c).enumerate() {
                        let o = (r % rb) * c;
                        for (x, y) in d[o..o + c].iter_mut().zip(grow) {
                            *x = *x + *y;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs_grad(*a) {
                    let d = self.adj_mut(adj, *a);
                    for ((x, y), w) in d.iter_mut().zip(g).zip(tb.data()) {
                        *x = *x + *y * *w;
                    }
                }
                if self.needs_grad(*b) {
                    let d = self.adj_mut(adj, *b);
                    for ((x, y), w) in d.iter_mut().zip(g).zip(ta.data()) {
                        *x = *x + *y * *w;
                    }
                }
            }
            Op::Scale(a, s) => {
                let sv = S::of_f64(*s);
                let d = self.adj_mut(adj, *a);
                for (x, y) in d.iter_mut().zip(g) {
                    *x = *x + *y * sv;
                }
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let d = self.adj_mut(adj, *a);
                for ((x, y), v) in d.iter_mut().zip(g).zip(ta.data()) {
                    let sig = S::one() / (S::one() + (-*v).exp());
                    *x = *x + *y * sig * (S::one() + *v * (S::one() - sig));
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let c = tx.cols();
                if self.needs_grad(*gain) {
                    let dg = self.adj_mut(adj, *gain);
                    for (r, iv) in inv.iter().enumerate() {
                        for j in 0..c {
                            let n = tx.data()[r * c + j].as_f64() * iv;
                            dg[j] = dg[j] + S::of_f64(g[r * c + j].as_f64() * n);
                        }
                    }
                }
                if self.needs_grad(*x) {
                    let dx = self.adj_mut(adj, *x);
                    for (r, iv) in inv.iter().enumerate() {
                        let mut dot = 0.0;
                        for j in 0..c {
                            let n = tx.data()[r * c + j].as_f64() * iv;
                            dot += g[r * c + j].as_f64() * tg.data()[j].as_f64() * n;
                        }
                        dot /= c as f64;
                        for j in 0..c {
                            let n = tx.data()[r * c + j].as_f64() * iv;
                            let dn = g[r * c + j].as_f64() * tg.data()[j].as_f64();
                            dx[r * c + j] = dx[r * c + j] + S::of_f64(iv * (dn - n * dot));
                        }
                    }
                }
            }
            Op::Rope {
                x,
                positions,
                head_dim,
                base,
            } => {
                let c = self.value(*x).cols();
                let dx = self.adj_mut(adj, *x);
                for (r, &pos) in positions.iter().enumerate() {
                    for h in 0..c / head_dim {
                        for p in 0..head_dim / 2 {
                            let (cos, sin) = rope_angle(pos, p, *head_dim, *base);
                            let o = r * c + h * head_dim + 2 * p;
                            let (g0, g1) = (g[o].as_f64(), g[o + 1].as_f64());
                            dx[o] = dx[o] + S::of_f64(g0 * cos + g1 * sin);
                            dx[o + 1] = dx[o + 1] + S::of_f64(-g0 * sin + g1 * cos);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                kv_heads,
                saved,
            } => self.attention_backward(g, adj, (*q, *k, *v), *heads, *kv_heads, saved),
            Op::SelectRows(src, idx) => {
                let c = self.value(*src).cols();
                let d = self.adj_mut(adj, *src);
                for (r, &s) in idx.iter().enumerate() {
                    for j in 0..c {
                        d[s * c + j] = d[s * c + j] + g[r * c + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs_grad(p) {
                        let d = self.adj_mut(adj, p);
                        for (x, y) in d.iter_mut().zip(&g[off..off + n]) {
                            *x = *x + *y;
                        }
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.dims2(p);
                    if self.needs_grad(p) {
                        let d = self.adj_mut(adj, p);
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] = d[i * c + j] + g[i * total + off + j];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::GroupMean(x, group) => {
                let c = self.value(*x).cols();
                let inv = S::of_f64(1.0 / *group as f64);
                let d = self.adj_mut(adj, *x);
                for (gi, grow) in g.chunks(c).enumerate() {
                    for k in 0..*group {
                        let o = (gi * group + k) * c;
                        for (dd, y) in d[o..o + c].iter_mut().zip(grow) {
                            *dd = *dd + *y * inv;
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let ty = &node.value;
                let c = ty.cols();
                let d = self.adj_mut(adj, *x);
                for r in 0..ty.rows() {
                    let yr = ty.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                    for j in 0..c {
                        let v = yr[j].as_f64() * (gr[j].as_f64() - dot);
                        d[r * c + j] = d[r * c + j] + S::of_f64(v);
                    }
                }
            }
            Op::Sum(x) => {
                let d = self.adj_mut(adj, *x);
                for v in d.iter_mut() {
                    *v = *v + g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                rows,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0].as_f64() / rows.len() as f64;
                let d = self.adj_mut(adj, *logits);
                for (n, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                    for j in 0..c {
                        let mut v = probs[n * c + j];
                        if j == t {
                            v -= 1.0;
                        }
                        d[r * c + j] = d[r * c + j] + S::of_f64(v * scale);
                    }
                }
            }
            Op::ReverseKl {
                logits,
                rows,
                dlogits,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0].as_f64() / rows.len() as f64;
                let d = self.adj_mut(adj, *logits);
                for (n, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] = d[r * c + j] + S::of_f64(dlogits[n * c + j] * scale);
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                beta,
                rows,
            } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let c = tp.cols();
                let scale = g[0].as_f64() / (rows.len() * c) as f64;
                let d = self.adj_mut(adj, *pred);
                for &r in rows {
                    for j in 0..c {
                        let diff = tp.data()[r * c + j].as_f64() - tt.data()[r * c + j].as_f64();
                        let gv = if diff.abs() < *beta { diff / beta } else { diff.signum() };
                        d[r * c + j] = d[r * c + j] + S::of_f64(gv * scale);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[S],
        adj: &mut [Option<Vec<S>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        kv_heads: usize,
        saved: &AttnSaved,
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let qc = tq.cols();
        let kc = tk.cols();
        let d = qc / heads;
        let group = heads / kv_heads;
        let scale = 1.0 / (d as f64).sqrt();
        let nnz = saved.cols.len();
        let mut dq = vec![0.0f64; tq.len()];
        let mut dk = vec![0.0f64; tk.len()];
        let mut dv = vec![0.0f64; tv.len()];
        for i in 0..tq.rows() {
            let (lo, hi) = (saved.row_ptr[i], saved.row_ptr[i + 1]);
            let cols = &saved.cols[lo..hi];
            for h in 0..heads {
                let kh = h / group;
                let probs = &saved.probs[h * nnz + lo..h * nnz + hi];
                let go = &g[i * qc + h * d..i * qc + (h + 1) * d];
                let dp: Vec<f64> = cols
                    .iter()
                    .map(|&j| {
                        let vrow = &tv.data()[j as usize * kc + kh * d..j as usize * kc + (kh + 1) * d];
                        go.iter().zip(vrow).map(|(a, b)| a.as_f64() * b.as_f64()).sum()
                    })
                    .collect();
                let s: f64 = probs.iter().zip(&dp).map(|(p, x)| p * x).sum();
                for ((&j, &p), &dpj) in cols.iter().zip(probs).zip(&dp) {
                    let j = j as usize;
                    let ds = p * (dpj - s) * scale;
                    for t in 0..d {
                        let kv_at = j * kc + kh * d + t;
                        let q_at = i * qc + h * d + t;
                        dq[q_at] += ds * tk.data()[kv_at].as_f64();
                        dk[kv_at] += ds * tq.data()[q_at].as_f64();
                        dv[kv_at] += p * go[t].as_f64();
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs_grad(var) {
                let d = self.adj_mut(adj, var);
                for (x, y) in d.iter_mut().zip(buf) {
                    *x = *x + S::of_f64(y);
                }
            }
        }
    }

    fn adj_mut<'b>(&self, adj: &'b mut [Option<Vec<S>>], v: Var) -> &'b mut Vec<S> {
        let n = self.value(v).len();
        adj[v.0].get_or_insert_with(|| vec![S::zero(); n])
    }
}

#[inline]
fn rope_angle(pos: usize, pair: usize, head_dim: usize, base: f64) -> (f64, f64) {
    let freq = base.powf(-(2.0 * pair as f64) / head_dim as f64);
    let a = pos as f64 * freq;
    (a.cos(), a.sin())
}

pub fn smooth_l1_value(diff: f64, beta: f64) -> f64 {
    if diff.abs() < beta {
        0.5 * diff * diff / beta
    } else {
        diff.abs() - 0.5 * beta
    }
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<S: Scalar = f32> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Scaled dot-product attention on plain tensors without a tape.
pub fn attention(
    q: &Tensor<f32>,
    k: &Tensor<f32>,
    v: &Tensor<f32>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor<f32>> {
    let kv_heads = if q.cols() == 0 || heads == 0 || q.cols() % heads != 0 {
        return Err(Error::Config(format!(
            "{heads} heads do not divide width {}",
            q.cols()
        )));
    } else {
        k.cols() / (q.cols() / heads)
    };
    let mut g: Graph<f32> = Graph::no_grad();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = g.attention(qv, kv, vv, &Rc::new(mask.clone()), heads, kv_heads.max(1))?;
    Ok(g.value(out).clone())
}
