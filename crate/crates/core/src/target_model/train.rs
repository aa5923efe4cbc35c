use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelWeights;
use crate::error::{Error, Result};
use crate::numerics::{param_grads, Adam, AdamConfig, AttentionMask, Graph, Parameters, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainTargetConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainTargetConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            seq_len: 48,
            lr: 3e-3,
            warmup: 50,
            seed: 0,
            eval_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// `(step, train_loss, eval_loss)`; eval is present every `eval_every` steps.
    pub curve: Vec<(usize, f64, Option<f64>)>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

/// Mean next-token cross-entropy over a batch of sequences packed into one
/// graph with block-causal attention.
pub fn lm_loss<'a, S: Scalar>(w: &'a ModelWeights, g: &mut Graph<'a, S>, seqs: &[Vec<u32>]) -> Result<Var> {
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut starts = Vec::new();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::Dimension("training sequence shorter than 2".into()));
        }
        if s.len() > w.config.max_seq {
            return Err(Error::Capacity {
                requested: s.len(),
                max_seq: w.config.max_seq,
            });
        }
        let off = tokens.len();
        for (i, &t) in s.iter().enumerate() {
            starts.push(off);
            positions.push(i);
            if i + 1 < s.len() {
                rows.push(off + i);
                targets.push(s[i + 1] as usize);
            }
            tokens.push(t);
        }
    }
    let mask = Rc::new(AttentionMask::from_fn(tokens.len(), tokens.len(), |i, j| {
        j >= starts[i] && j <= i
    })?);
    let x = w.embed(g, &tokens)?;
    let past = vec![None; w.config.layers];
    let (_, out, _) = w.run_layers(g, x, 0, &positions, &past, &mask)?;
    let logits = w.head(g, out)?;
    g.cross_entropy(logits, &targets, &rows)
}

pub fn loss_and_grads(w: &ModelWeights, seqs: &[Vec<u32>]) -> Result<(f64, Vec<Option<Tensor<f32>>>)> {
    let mut g: Graph<f32> = Graph::new();
    let loss = lm_loss(w, &mut g, seqs)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0] as f64, param_grads(&g, &grads, w)))
}

/// Held-out mean next-token cross-entropy (sequences evaluated in chunks).
pub fn evaluate_loss(w: &ModelWeights, seqs: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(8) {
        let mut g: Graph<f32> = Graph::no_grad();
        let loss = lm_loss(w, &mut g, chunk)?;
        let n: usize = chunk.iter().map(|s| s.len() - 1).sum();
        total += g.value(loss).data()[0] as f64 * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

fn crop<R: Rng>(rng: &mut R, seq: &[u32], len: usize) -> Vec<u32> {
    if seq.len() <= len {
        return seq.to_vec();
    }
    let start = rng.gen_range(0..=seq.len() - len);
    seq[start..start + len].to_vec()
}

/// Adam with gradient clipping on random crops of `train`. The held-out loss
/// is recorded before the first step and every `eval_every` steps.
pub fn train_target(
    w: &mut ModelWeights,
    train: &[Vec<u32>],
    heldout: &[Vec<u32>],
    cfg: &TrainTargetConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    for s in train {
        w.check_tokens(s)?;
    }
    w.set_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut report = TrainReport {
        initial_eval: evaluate_loss(w, heldout)?,
        ..TrainReport::default()
    };
    let mut last_eval = report.initial_eval;
    for step in 0..cfg.steps {
        let batch: Vec<Vec<u32>> = (0..cfg.batch_size)
            .map(|_| {
                let s = train.choose(&mut rng).expect("non-empty");
                crop(&mut rng, s, cfg.seq_len)
            })
            .collect();
        let (loss, grads) = loss_and_grads(w, &batch).map_err(|e| match e {
            Error::Loss { position } => Error::Training {
                step,
                reason: format!("non-finite loss at position {position}"),
            },
            other => other,
        })?;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: "non-finite loss".into(),
            });
        }
        let lr = cfg.lr * ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        let grads: Vec<Option<Tensor<f32>>> = grads;
        adam.step(w, &grads, lr).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        let eval = if cfg.eval_every > 0 && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
            last_eval = evaluate_loss(w, heldout)?;
            log::debug!("target step {} loss {loss:.4} eval {last_eval:.4}", step + 1);
            Some(last_eval)
        } else {
            None
        };
        report.curve.push((step, loss, eval));
    }
    report.final_eval = if cfg.eval_every == 0 {
        evaluate_loss(w, heldout)?
    } else {
        last_eval
    };
    w.set_trainable(false);
    Ok(report)
}
