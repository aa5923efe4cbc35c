//! Seeded synthetic token streams: an order-2 Markov source mixed with
//! arithmetic progressions. Token `0` is reserved for end-of-sequence and is
//! never emitted by the generator.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probabilities of the four successor candidates of a Markov context.
pub const CANDIDATE_PROBS: [f64; 4] = [0.6, 0.2, 0.12, 0.08];
const STRIDE_CLASSES: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Seed of the language tables (shared by every split).
    pub language_seed: u64,
    /// Fraction of sequences that are arithmetic progressions.
    pub arithmetic_share: f64,
    pub max_step: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            language_seed: 1234,
            arithmetic_share: 0.3,
            max_step: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticLanguage {
    vocab: usize,
    successor: Vec<u32>,
    stride: Vec<u32>,
    arithmetic_share: f64,
    max_step: u32,
}

/// Which independent random stream a split draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    HeldOut = 1,
}

pub fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split as u64 + 1);
    rng
}

impl SyntheticLanguage {
    pub fn new(vocab: usize, cfg: &CorpusConfig) -> Self {
        assert!(vocab >= 3, "vocabulary too small for a synthetic language");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.language_seed);
        let span = vocab as u32 - 1;
        let max_stride = (span / 4).max(1);
        Self {
            vocab,
            successor: (0..vocab).map(|_| rng.gen_range(0..span)).collect(),
            stride: (0..STRIDE_CLASSES).map(|_| rng.gen_range(1..=max_stride)).collect(),
            arithmetic_share: cfg.arithmetic_share,
            max_step: cfg.max_step.max(1),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn wrap(&self, x: u64) -> u32 {
        1 + (x % (self.vocab as u64 - 1)) as u32
    }

    /// Successor candidates of context `(a, b)` with their probabilities.
    pub fn next_distribution(&self, a: u32, b: u32) -> Vec<(u32, f64)> {
        let base = self.successor[b as usize] as u64;
        let stride = self.stride[a as usize % STRIDE_CLASSES] as u64;
        CANDIDATE_PROBS
            .iter()
            .enumerate()
            .map(|(k, &p)| (self.wrap(base + k as u64 * stride), p))
            .collect()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, len: usize) -> Vec<u32> {
        let hi = self.vocab as u32;
        if rng.gen_bool(self.arithmetic_share) {
            let start = rng.gen_range(1..hi) as u64;
            let step = rng.gen_range(1..=self.max_step) as u64;
            return (0..len as u64).map(|i| self.wrap(start - 1 + i * step)).collect();
        }
        let mut seq = vec![rng.gen_range(1..hi), rng.gen_range(1..hi)];
        while seq.len() < len {
            let n = seq.len();
            let dist = self.next_distribution(seq[n - 2], seq[n - 1]);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = dist[dist.len() - 1].0;
            for (tok, p) in dist {
                acc += p;
                if u < acc {
                    pick = tok;
                    break;
                }
            }
            seq.push(pick);
        }
        seq.truncate(len);
        seq
    }

    pub fn sequences<R: Rng>(&self, rng: &mut R, count: usize, len: usize) -> Vec<Vec<u32>> {
        (0..count).map(|_| self.sample(rng, len)).collect()
    }
}
