//! The toy target transformer: full and incremental forwards over a KV
//! cache, per-layer activation taps, top-layer decomposition, and decoding.

mod cache;
pub mod corpus;
mod train;

use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, ones, BlockDims, BlockOut, DecoderLayer, Rope, NORM_EPS};
use crate::numerics::{argmax, AttentionMask, Graph, Parameters, Scalar, Tensor, Var};

pub use cache::{KvCache, StateSnapshot};
pub use train::{evaluate_loss, train_target, TrainReport, TrainTargetConfig};

pub const TARGET_MAGIC: [u8; 4] = *b"SDLW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub embed: usize,
    pub kv_embed: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub max_seq: usize,
    pub eos_token: u32,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            layers: 8,
            embed: 64,
            kv_embed: 16,
            heads: 4,
            mlp_hidden: 128,
            max_seq: 512,
            eos_token: 0,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<BlockDims> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocabulary needs at least two tokens".into()));
        }
        if self.max_seq == 0 {
            return Err(Error::Config("max_seq must be positive".into()));
        }
        if self.eos_token as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "eos token {} outside vocabulary {}",
                self.eos_token, self.vocab_size
            )));
        }
        if self.kv_embed % self.heads.max(1) != 0 {
            return Err(Error::Config(format!(
                "kv_embed {} not divisible by {} heads",
                self.kv_embed, self.heads
            )));
        }
        BlockDims::new(self.embed, self.kv_embed, self.heads, self.mlp_hidden)
    }

    pub fn dims(&self) -> BlockDims {
        self.validate().expect("validated config")
    }

    /// Stable hash of the JSON encoding, used to pair drafters with targets.
    pub fn hash(&self) -> String {
        checkpoint::sha256_hex(&serde_json::to_vec(self).expect("serializable"))
    }
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub token_embed: Arc<Tensor<f32>>,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Tensor<f32>,
    pub lm_head: Arc<Tensor<f32>>,
}

impl Parameters for ModelWeights {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Tensor<f32>)) {
        f("token_embed", &self.token_embed);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layer{i}"), f);
        }
        f("final_norm", &self.final_norm);
        f("lm_head", &self.lm_head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f("token_embed", Arc::make_mut(&mut self.token_embed));
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layer{i}"), f);
        }
        f("final_norm", &mut self.final_norm);
        f("lm_head", Arc::make_mut(&mut self.lm_head));
    }
}

/// Everything one forward call produced for its new rows.
#[derive(Debug, Clone)]
pub struct RowsOut {
    /// `[rows, vocab]` next-token logits.
    pub logits: Tensor<f32>,
    /// Tap levels `1..=L+1`: index `l - 1` holds `[rows, embed]` activations.
    pub taps: Vec<Tensor<f32>>,
    /// Per layer `[rows, kv_embed]` post-rotary keys and values.
    pub keys: Vec<Tensor<f32>>,
    pub values: Vec<Tensor<f32>>,
}

impl ModelWeights {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let dims = config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out_std = 1.0 / (dims.width as f64).sqrt() / (2.0 * config.layers as f64).sqrt();
        let token_embed = normal_tensor(&mut rng, &[config.vocab_size, config.embed], 1.0);
        let layers = (0..config.layers)
            .map(|_| DecoderLayer::init(&mut rng, dims, out_std))
            .collect();
        let lm_head = normal_tensor(
            &mut rng,
            &[config.embed, config.vocab_size],
            1.0 / (config.embed as f64).sqrt(),
        );
        Ok(Self {
            final_norm: ones(config.embed),
            token_embed: Arc::new(token_embed),
            layers,
            lm_head: Arc::new(lm_head),
            config,
        })
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&token) => Err(Error::Bounds {
                token,
                vocab: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Token embedding rows for `tokens` on the graph.
    pub fn embed<'a, S: Scalar>(&'a self, g: &mut Graph<'a, S>, tokens: &[u32]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = g.param(&self.token_embed);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        g.select_rows(table, &idx)
    }

    pub fn head<'a, S: Scalar>(&'a self, g: &mut Graph<'a, S>, o_final: Var) -> Result<Var> {
        let w = g.param(&self.lm_head);
        g.matmul(o_final, w)
    }

    pub fn final_norm<'a, S: Scalar>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Result<Var> {
        let gain = g.param(&self.final_norm);
        g.rms_norm(x, gain, NORM_EPS)
    }

    /// Runs 0-based layers `first..L` on `x`, then the final norm.
    ///
    /// `past[i]` are the cached key/value rows prepended for layer `first + i`.
    /// Returns the tap entering each run layer, the final output, and the
    /// per-layer block outputs.
    pub fn run_layers<'a, S: Scalar>(
        &'a self,
        g: &mut Graph<'a, S>,
        x: Var,
        first: usize,
        positions: &[usize],
        past: &[Option<(Var, Var)>],
        mask: &Rc<AttentionMask>,
    ) -> Result<(Vec<Var>, Var, Vec<BlockOut>)> {
        let l = self.config.layers;
        if first > l || past.len() != l - first {
            return Err(Error::Config(format!(
                "layer range starting at {first} with {} caches for {l} layers",
                past.len()
            )));
        }
        let rope = Rope {
            positions,
            base: self.config.rope_base,
        };
        let mut taps = Vec::with_capacity(l - first);
        let mut blocks = Vec::with_capacity(l - first);
        let mut h = x;
        for (i, layer) in self.layers[first..].iter().enumerate() {
            taps.push(h);
            let b = layer.forward(g, h, Some(rope), past[i], mask)?;
            h = b.out;
            blocks.push(b);
        }
        let out = if first == l { h } else { self.final_norm(g, h)? };
        Ok((taps, out, blocks))
    }

    /// Forward over new rows attending `[cache ; new]` under `mask`.
    pub fn forward_rows(
        &self,
        cache: &KvCache,
        tokens: &[u32],
        positions: &[usize],
        mask: &AttentionMask,
    ) -> Result<RowsOut> {
        let rows = tokens.len();
        if rows == 0 || positions.len() != rows {
            return Err(Error::Dimension(format!(
                "{rows} tokens with {} positions",
                positions.len()
            )));
        }
        if mask.rows() != rows || mask.cols() != cache.len() + rows {
            return Err(Error::Dimension(format!(
                "mask {}x{} for {rows} rows over {} cached",
                mask.rows(),
                mask.cols(),
                cache.len()
            )));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= self.config.max_seq {
                return Err(Error::Capacity {
                    requested: p + 1,
                    max_seq: self.config.max_seq,
                });
            }
        }
        let mut g: Graph<f32> = Graph::no_grad();
        let x = self.embed(&mut g, tokens)?;
        let past = cache_vars(&mut g, cache, 0)?;
        let mask = Rc::new(mask.clone());
        let (mut taps, out, blocks) = self.run_layers(&mut g, x, 0, positions, &past, &mask)?;
        taps.push(out);
        let logits = self.head(&mut g, out)?;
        Ok(RowsOut {
            logits: g.value(logits).clone(),
            taps: taps.iter().map(|&v| g.value(v).clone()).collect(),
            keys: blocks.iter().map(|b| g.value(b.keys).clone()).collect(),
            values: blocks.iter().map(|b| g.value(b.values).clone()).collect(),
        })
    }

    pub fn empty_snapshot(&self) -> StateSnapshot {
        StateSnapshot::new(&self.config)
    }
}

/// Cached key/value rows of layers `first..L` as graph inputs (`None` if empty).
pub fn cache_vars<S: Scalar>(g: &mut Graph<'_, S>, cache: &KvCache, first: usize) -> Result<Vec<Option<(Var, Var)>>> {
    (first..cache.layer_count())
        .map(|l| {
            if cache.is_empty() {
                return Ok(None);
            }
            let k = g.input_rows(cache.len(), cache.kv_width(), cache.keys(l))?;
            let v = g.input_rows(cache.len(), cache.kv_width(), cache.values(l))?;
            Ok(Some((k, v)))
        })
        .collect()
}

/// Mask for `rows` new rows appended after `cached` rows: every cached
/// column plus causal attention among the new rows.
pub fn append_mask(cached: usize, rows: usize) -> Result<AttentionMask> {
    AttentionMask::from_fn(rows, cached + rows, |i, j| j < cached + i + 1)
}

/// Processes `tokens` from scratch, returning the full state and per-position logits.
pub fn forward_full(w: &ModelWeights, tokens: &[u32]) -> Result<(StateSnapshot, Tensor<f32>)> {
    if tokens.is_empty() {
        return Err(Error::Dimension("empty token sequence".into()));
    }
    if tokens.len() > w.config.max_seq {
        return Err(Error::Capacity {
            requested: tokens.len(),
            max_seq: w.config.max_seq,
        });
    }
    let mut snap = w.empty_snapshot();
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let out = w.forward_rows(&snap.cache, tokens, &positions, &append_mask(0, tokens.len())?)?;
    let all: Vec<usize> = (0..tokens.len()).collect();
    snap.append_rows(&out, &all, tokens)?;
    Ok((snap, out.logits))
}

/// Appends one token to `snap`, returning its next-token logits. On error the
/// snapshot is left untouched.
pub fn forward_incremental(w: &ModelWeights, snap: &mut StateSnapshot, token: u32) -> Result<Vec<f32>> {
    let t = snap.len();
    if t + 1 > w.config.max_seq {
        return Err(Error::Capacity {
            requested: t + 1,
            max_seq: w.config.max_seq,
        });
    }
    let out = w.forward_rows(&snap.cache, &[token], &[t], &append_mask(t, 1)?)?;
    snap.append_rows(&out, &[0], &[token])?;
    Ok(out.logits.into_data())
}

/// Runs the top `n` layers on `input` (the tap `n` layers below the head).
///
/// Keys are `[cache ; drafted ; new]` per layer; `drafted` is either empty or
/// holds one `(keys, values)` pair per run layer. Returns the head input and
/// the new key/value rows per run layer without touching the cache.
pub fn decode_layers(
    w: &ModelWeights,
    cache: &KvCache,
    input: &Tensor<f32>,
    n: usize,
    drafted: &[(Tensor<f32>, Tensor<f32>)],
    positions: &[usize],
    mask: &AttentionMask,
) -> Result<(Tensor<f32>, Vec<(Tensor<f32>, Tensor<f32>)>)> {
    let l = w.config.layers;
    if n > l {
        return Err(Error::Config(format!("cannot run top {n} of {l} layers")));
    }
    if n == 0 {
        return Ok((input.clone(), Vec::new()));
    }
    if !drafted.is_empty() && drafted.len() != n {
        return Err(Error::Dimension(format!(
            "drafted cache for {} layers, expected {n}",
            drafted.len()
        )));
    }
    let first = l - n;
    let mut g: Graph<f32> = Graph::no_grad();
    let x = g.input(input.clone());
    let cached = cache_vars(&mut g, cache, first)?;
    let mut past = Vec::with_capacity(n);
    for (i, c) in cached.into_iter().enumerate() {
        let extra = drafted.get(i).filter(|(k, _)| !k.is_empty());
        past.push(match (c, extra) {
            (c, None) => c,
            (None, Some((k, v))) => Some((g.input(k.clone()), g.input(v.clone()))),
            (Some((ck, cv)), Some((k, v))) => {
                let (dk, dv) = (g.input(k.clone()), g.input(v.clone()));
                Some((g.concat_rows(&[ck, dk])?, g.concat_rows(&[cv, dv])?))
            }
        });
    }
    let (_, out, blocks) = w.run_layers(&mut g, x, first, positions, &past, &Rc::new(mask.clone()))?;
    let kv = blocks
        .iter()
        .map(|b| (g.value(b.keys).clone(), g.value(b.values).clone()))
        .collect();
    Ok((g.value(out).clone(), kv))
}

/// Next-token selection rule.
#[derive(Debug, Clone)]
pub enum Sampler {
    Greedy,
    Sample { rng: ChaCha8Rng, temperature: f64 },
}

impl Sampler {
    pub fn seeded(seed: u64, temperature: f64) -> Self {
        Sampler::Sample {
            rng: ChaCha8Rng::seed_from_u64(seed),
            temperature,
        }
    }

    pub fn is_greedy(&self) -> bool {
        matches!(self, Sampler::Greedy)
    }

    pub fn pick(&mut self, logits: &[f32]) -> u32 {
        match self {
            Sampler::Greedy => argmax(logits) as u32,
            Sampler::Sample { rng, temperature } => {
                let p = probabilities(logits, *temperature);
                sample_index(rng, &p) as u32
            }
        }
    }
}

/// Softmax of `logits / temperature` in 64-bit.
pub fn probabilities(logits: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&x| x as f64 / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Plain autoregressive decoding: one target forward per generated token.
/// Stops after `max_new` tokens or right after emitting the end token.
pub fn vanilla_decode(w: &ModelWeights, prompt: &[u32], sampler: &mut Sampler, max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Dimension("empty prompt".into()));
    }
    let mut out = Vec::new();
    if max_new == 0 {
        w.check_tokens(prompt)?;
        return Ok(out);
    }
    let (mut snap, logits) = forward_full(w, prompt)?;
    let mut next = sampler.pick(logits.row(prompt.len() - 1));
    loop {
        out.push(next);
        if out.len() >= max_new || next == w.config.eos_token {
            return Ok(out);
        }
        let logits = forward_incremental(w, &mut snap, next)?;
        next = sampler.pick(&logits);
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetHeader {
    config: ModelConfig,
}

pub fn save_target(w: &ModelWeights, path: &std::path::Path) -> Result<String> {
    let header = serde_json::to_vec(&TargetHeader {
        config: w.config.clone(),
    })?;
    checkpoint::write(path, &TARGET_MAGIC, CHECKPOINT_VERSION, &header, w)
}

pub fn load_target(path: &std::path::Path) -> Result<ModelWeights> {
    let file = checkpoint::read(path, &TARGET_MAGIC)?;
    let header: TargetHeader = serde_json::from_slice(&file.header)?;
    let mut w = ModelWeights::init(header.config, 0)?;
    file.fill(&mut w)?;
    Ok(w)
}
