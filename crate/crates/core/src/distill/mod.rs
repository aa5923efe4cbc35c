//! Drafter distillation against a frozen target.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drafters::{DraftModel, TeacherForced, Variant};
use crate::error::{Error, Result};
use crate::numerics::{param_grads, Adam, AdamConfig, Graph, Parameters, Scalar, Tensor, Var};
use crate::target_model::{forward_full, StateSnapshot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the reverse-KL term.
    pub kl: f64,
    /// Weight of the activation regression term.
    pub smooth_l1: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            kl: 0.1,
            smooth_l1: 1.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossWeights {
    /// Defaults per drafter family; the independent model has no activation target.
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Independent => Self {
                smooth_l1: 0.0,
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl >= 0.0 && self.smooth_l1 >= 0.0) || self.kl + self.smooth_l1 == 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero: {self:?}"
            )));
        }
        if self.smooth_l1_beta <= 0.0 {
            return Err(Error::Config("smooth-L1 beta must be positive".into()));
        }
        Ok(())
    }
}

/// Break points after `prompt_len` from explicit segment lengths; points at or
/// beyond `seq_len` are dropped.
pub fn breaks_from_gaps(prompt_len: usize, seq_len: usize, gaps: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = prompt_len;
    for &g in gaps {
        at += g;
        if at >= seq_len {
            break;
        }
        out.push(at);
    }
    out
}

/// Verification points splitting the response into segments whose lengths
/// are uniform on `range`.
pub fn sample_ca_breaks<R: Rng + ?Sized>(
    rng: &mut R,
    prompt_len: usize,
    seq_len: usize,
    range: (usize, usize),
) -> Result<Vec<usize>> {
    let (lo, hi) = range;
    if lo == 0 || hi < lo {
        return Err(Error::Config(format!("segment length range {lo}..={hi}")));
    }
    let mut out = Vec::new();
    let mut at = prompt_len;
    while at < seq_len {
        at += rng.gen_range(lo..=hi);
        if at < seq_len {
            out.push(at);
        }
    }
    Ok(out)
}

/// One teacher-forced training sequence with the frozen target's outputs.
#[derive(Debug, Clone)]
pub struct DistillExample {
    pub snap: StateSnapshot,
    pub target_logits: Tensor<f32>,
    pub prompt_len: usize,
    pub breaks: Vec<usize>,
}

impl DistillExample {
    pub fn new(drafter: &DraftModel, tokens: &[u32], prompt_len: usize, breaks: Vec<usize>) -> Result<Self> {
        if prompt_len == 0 || prompt_len >= tokens.len() {
            return Err(Error::Dimension(format!(
                "prompt of {prompt_len} in a sequence of {}",
                tokens.len()
            )));
        }
        let (snap, target_logits) = forward_full(&drafter.target, tokens)?;
        Ok(Self {
            snap,
            target_logits,
            prompt_len,
            breaks,
        })
    }

    /// Response rows that carry loss.
    pub fn loss_rows(&self) -> Vec<usize> {
        (self.prompt_len..self.snap.len()).collect()
    }
}

/// Tap the drafter regresses onto: `n` layers below the head.
pub fn target_tap(drafter: &DraftModel, ex: &DistillExample) -> Tensor<f32> {
    let level = drafter.target.config.layers + 1 - drafter.config.n;
    ex.snap.tap_rows(level, 0, ex.snap.len())
}

/// Weighted reverse-KL plus smooth-L1 over the response rows of `ex`.
pub fn distill_loss<'a, S: Scalar>(
    g: &mut Graph<'a, S>,
    drafter: &'a DraftModel,
    tf: TeacherForced,
    ex: &DistillExample,
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let rows = ex.loss_rows();
    let mut total: Option<Var> = None;
    if weights.kl > 0.0 {
        let p = g.input(ex.target_logits.cast::<S>());
        let kl = g.reverse_kl(tf.logits, p, &rows)?;
        total = Some(g.scale(kl, weights.kl));
    }
    if weights.smooth_l1 > 0.0 {
        let o = g.input(target_tap(drafter, ex).cast::<S>());
        let l1 = g.smooth_l1(tf.predicted, o, weights.smooth_l1_beta, &rows)?;
        let l1 = g.scale(l1, weights.smooth_l1);
        total = Some(match total {
            Some(t) => g.add(t, l1)?,
            None => l1,
        });
    }
    let total = total.expect("validated weights");
    if !g.value(total).data()[0].as_f64().is_finite() {
        return Err(Error::Loss { position: rows[0] });
    }
    Ok(total)
}

/// Loss of `ex` and, when recording, gradients for the drafter's tensors.
pub fn example_loss<S: Scalar>(
    drafter: &DraftModel,
    ex: &DistillExample,
    weights: &LossWeights,
    noise: Option<&mut dyn RngCore>,
    with_grads: bool,
) -> Result<(f64, Vec<Option<Tensor<S>>>)> {
    let mut g: Graph<S> = if with_grads { Graph::new() } else { Graph::no_grad() };
    let tf = drafter.teacher_forced(&mut g, &ex.snap, ex.prompt_len, &ex.breaks, noise)?;
    let loss = distill_loss(&mut g, drafter, tf, ex, weights)?;
    let value = g.value(loss).data()[0].as_f64();
    if !with_grads {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, param_grads(&g, &grads, drafter)))
}

/// Mean loss over `examples` without gradients.
pub fn evaluate(drafter: &DraftModel, examples: &[DistillExample], weights: &LossWeights) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in examples {
        total += example_loss::<f32>(drafter, ex, weights, None, false)?.0;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub prompt_min: usize,
    pub prompt_max: usize,
    pub segment_min: usize,
    pub segment_max: usize,
    pub lr: f64,
    pub warmup: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_sequences: usize,
    /// Overrides the per-variant loss weights.
    pub weights: Option<LossWeights>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 4,
            seq_len: 48,
            prompt_min: 4,
            prompt_max: 16,
            segment_min: 5,
            segment_max: 15,
            lr: 1e-3,
            warmup: 20,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 100,
            eval_sequences: 8,
            weights: None,
        }
    }
}

impl DistillConfig {
    pub fn weights_for(&self, variant: Variant) -> LossWeights {
        self.weights.unwrap_or_else(|| LossWeights::for_variant(variant))
    }

    fn validate(&self) -> Result<()> {
        if self.prompt_min == 0 || self.prompt_max < self.prompt_min || self.prompt_max + 1 >= self.seq_len {
            return Err(Error::Config(format!(
                "prompt range {}..={} does not fit sequences of {}",
                self.prompt_min, self.prompt_max, self.seq_len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    /// Random crop of a corpus sequence with a prompt split and break points.
    fn draw<R: Rng>(&self, rng: &mut R, drafter: &DraftModel, corpus: &[Vec<u32>]) -> Result<DistillExample> {
        let seq = corpus.choose(rng).ok_or_else(|| Error::Config("empty corpus".into()))?;
        let len = self.seq_len.min(seq.len());
        let start = rng.gen_range(0..=seq.len() - len);
        let tokens = &seq[start..start + len];
        let prompt_hi = self.prompt_max.min(len.saturating_sub(2)).max(1);
        let prompt_len = rng.gen_range(self.prompt_min.min(prompt_hi)..=prompt_hi);
        let breaks = sample_ca_breaks(rng, prompt_len, len, (self.segment_min, self.segment_max))?;
        DistillExample::new(drafter, tokens, prompt_len, breaks)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DistillReport {
    /// `(step, train_loss, eval_loss)`.
    pub curve: Vec<(usize, f64, Option<f64>)>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Fixed held-out examples drawn from `corpus` with `seed`.
pub fn heldout_examples(
    drafter: &DraftModel,
    corpus: &[Vec<u32>],
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Vec<DistillExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.eval_sequences)
        .map(|_| cfg.draw(&mut rng, drafter, corpus))
        .collect()
}

/// Trains the drafter's own tensors with Adam on teacher-forced examples;
/// the target stays untouched.
pub fn train_drafter(
    drafter: &mut DraftModel,
    train: &[Vec<u32>],
    heldout: &[Vec<u32>],
    cfg: &DistillConfig,
) -> Result<DistillReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let weights = cfg.weights_for(drafter.variant());
    weights.validate()?;
    drafter.set_trainable(true);
    let eval_set = if heldout.is_empty() {
        Vec::new()
    } else {
        heldout_examples(drafter, heldout, cfg, cfg.seed ^ 0x5eed)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(cfg.clip_norm),
        ..AdamConfig::default()
    });
    let mut report = DistillReport {
        initial_eval: evaluate(drafter, &eval_set, &weights)?,
        ..DistillReport::default()
    };
    let mut last_eval = report.initial_eval;
    for step in 0..cfg.steps {
        let batch: Vec<DistillExample> = (0..cfg.batch_size)
            .map(|_| cfg.draw(&mut rng, drafter, train))
            .collect::<Result<_>>()?;
        let mut sum: Vec<Option<Tensor<f32>>> = Vec::new();
        let mut loss = 0.0;
        for ex in &batch {
            let (l, grads) = example_loss::<f32>(drafter, ex, &weights, Some(&mut noise_rng), true).map_err(|e| {
                match e {
                    Error::Loss { position } => Error::Training {
                        step,
                        reason: format!("non-finite loss at position {position}"),
                    },
                    other => other,
                }
            })?;
            loss += l / batch.len() as f64;
            accumulate(&mut sum, grads, 1.0 / batch.len() as f32);
        }
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        adam.step(drafter, &sum, lr).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        let eval = if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            last_eval = evaluate(drafter, &eval_set, &weights)?;
            log::debug!(
                "drafter {} step {} loss {loss:.4} eval {last_eval:.4}",
                drafter.variant(),
                step + 1
            );
            Some(last_eval)
        } else {
            None
        };
        report.curve.push((step, loss, eval));
    }
    report.final_eval = if cfg.eval_every == 0 {
        evaluate(drafter, &eval_set, &weights)?
    } else {
        last_eval
    };
    drafter.set_trainable(false);
    Ok(report)
}

fn accumulate(sum: &mut Vec<Option<Tensor<f32>>>, grads: Vec<Option<Tensor<f32>>>, weight: f32) {
    if sum.is_empty() {
        sum.resize(grads.len(), None);
    }
    for (acc, g) in sum.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match acc {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += weight * y),
            None => {
                let mut g = g;
                g.data_mut().iter_mut().for_each(|x| *x *= weight);
                *acc = Some(g);
            }
        }
    }
}

/// Writes `(step, train_loss, eval_loss)` rows with a header.
pub fn write_curve_csv(path: &Path, curve: &[(usize, f64, Option<f64>)]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_loss", "eval_loss"])?;
    for (step, train, eval) in curve {
        w.write_record([
            step.to_string(),
            train.to_string(),
            eval.map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
