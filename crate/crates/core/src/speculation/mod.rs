//! Draft-verify engine: chain and dynamic-tree drafting, greedy and
//! rejection-sampling verification, and per-cycle accounting.
//!
//! The target snapshot always holds the verified prefix; the last verified
//! token is kept *pending* (not yet in the cache) and is scored together with
//! the drafts in each verification forward.

mod metrics;
mod tree;
mod verify;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::drafters::{DraftModel, DraftState};
use crate::error::{Error, Result};
use crate::target_model::{
    append_mask, forward_full, probabilities, sample_index, ModelWeights, Sampler, StateSnapshot,
};

pub use metrics::{CycleMetrics, CycleRecord, MetricsLine};
pub use tree::{build_tree, top_k, DraftNode, DraftTree, TreeShape};
pub use verify::{
    acceptance_probability, residual_distribution, speculative_step, tree_mask, verify_greedy, verify_sampling,
    SampledChain, StepOutcome, VerificationOutcome,
};

/// Handle of the pending token in a [`DraftSource`].
pub const ROOT_HANDLE: usize = 0;

/// Anything that can propose next-token logits along draft paths.
pub trait DraftSource {
    /// Called after the target verified rows `start..snap.len()`; `pending` is
    /// the next token to be processed. Discards all drafts.
    fn commit(&mut self, snap: &StateSnapshot, start: usize, pending: u32) -> Result<()>;

    /// Logits for the token following the pending one.
    fn root(&mut self) -> Result<Vec<f32>>;

    /// Drafts `token` under `parent`, returning its handle and the logits for
    /// the token after it.
    fn extend(&mut self, parent: usize, token: u32) -> Result<(usize, Vec<f32>)>;

    fn forward_calls(&self) -> usize {
        0
    }
}

/// A trained drafter plus its drafting-side state.
#[derive(Debug, Clone)]
pub struct ModelDrafter<'m> {
    pub model: &'m DraftModel,
    pub state: DraftState,
}

impl<'m> ModelDrafter<'m> {
    pub fn new(model: &'m DraftModel) -> Self {
        Self {
            model,
            state: model.new_state(),
        }
    }
}

impl DraftSource for ModelDrafter<'_> {
    fn commit(&mut self, snap: &StateSnapshot, start: usize, pending: u32) -> Result<()> {
        let feed = self.model.build_feed(snap, start, snap.len())?;
        self.state.commit(self.model, &snap.tokens[start..], &feed, pending)
    }

    fn root(&mut self) -> Result<Vec<f32>> {
        self.state.root(self.model)
    }

    fn extend(&mut self, parent: usize, token: u32) -> Result<(usize, Vec<f32>)> {
        self.state.extend(self.model, parent, token)
    }

    fn forward_calls(&self) -> usize {
        self.state.forward_calls()
    }
}

/// Drafts with the target itself: every proposal is the target's own
/// next-token distribution.
#[derive(Debug, Clone)]
pub struct TargetOracle<'w> {
    target: &'w ModelWeights,
    snap: StateSnapshot,
    pending: Option<u32>,
    paths: Vec<Vec<u32>>,
    calls: usize,
}

impl<'w> TargetOracle<'w> {
    pub fn new(target: &'w ModelWeights) -> Self {
        Self {
            target,
            snap: target.empty_snapshot(),
            pending: None,
            paths: Vec::new(),
            calls: 0,
        }
    }

    fn logits_after(&mut self, path: &[u32]) -> Result<Vec<f32>> {
        let pending = self
            .pending
            .ok_or_else(|| Error::Protocol("oracle drafter used before commit".into()))?;
        let t = self.snap.len();
        let mut tokens = vec![pending];
        tokens.extend_from_slice(path);
        let positions: Vec<usize> = (t..t + tokens.len()).collect();
        let out = self
            .target
            .forward_rows(&self.snap.cache, &tokens, &positions, &append_mask(t, tokens.len())?)?;
        self.calls += 1;
        Ok(out.logits.row(tokens.len() - 1).to_vec())
    }
}

impl DraftSource for TargetOracle<'_> {
    fn commit(&mut self, snap: &StateSnapshot, _start: usize, pending: u32) -> Result<()> {
        self.snap = snap.clone();
        self.pending = Some(pending);
        self.paths.clear();
        Ok(())
    }

    fn root(&mut self) -> Result<Vec<f32>> {
        self.paths = vec![Vec::new()];
        self.logits_after(&[])
    }

    fn extend(&mut self, parent: usize, token: u32) -> Result<(usize, Vec<f32>)> {
        let mut path = self
            .paths
            .get(parent)
            .cloned()
            .ok_or_else(|| Error::Structure(format!("unknown draft handle {parent}")))?;
        path.push(token);
        let logits = self.logits_after(&path)?;
        self.paths.push(path);
        Ok((self.paths.len() - 1, logits))
    }

    fn forward_calls(&self) -> usize {
        self.calls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DraftMode {
    Chain { k: usize },
    Tree(TreeShape),
}

impl DraftMode {
    pub fn shape(&self) -> TreeShape {
        match *self {
            DraftMode::Chain { k } => TreeShape::chain(k),
            DraftMode::Tree(s) => s,
        }
    }

    /// Shape limited to `depth` levels (and a budget no larger than needed).
    pub(crate) fn clamped(&self, depth: usize) -> TreeShape {
        let s = self.shape();
        if depth >= s.depth {
            return s;
        }
        let cap = s.breadth * depth;
        TreeShape {
            breadth: s.breadth,
            depth,
            budget: s.budget.min(cap.max(s.breadth)),
        }
    }
}

/// Samples a chain of `k` drafts from `src` at `temperature`, recording the
/// drafter distribution of each step.
pub fn draft_chain_sampled<D: DraftSource + ?Sized>(
    src: &mut D,
    k: usize,
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<SampledChain> {
    let mut chain = SampledChain {
        tokens: Vec::with_capacity(k),
        q: Vec::with_capacity(k),
    };
    if k == 0 {
        return Ok(chain);
    }
    let mut logits = src.root()?;
    let mut handle = ROOT_HANDLE;
    loop {
        let q = probabilities(&logits, temperature);
        let x = sample_index(rng, &q) as u32;
        chain.tokens.push(x);
        chain.q.push(q);
        if chain.tokens.len() == k {
            return Ok(chain);
        }
        let (h, l) = src.extend(handle, x)?;
        handle = h;
        logits = l;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub tokens: Vec<u32>,
    pub metrics: CycleMetrics,
    /// Target state after the final cycle.
    pub snapshot: StateSnapshot,
}

/// Outcome of appending verified tokens to an output: true when the episode ends.
pub(crate) fn push_output(out: &mut Vec<u32>, new: &[u32], max_new: usize, eos: u32) -> bool {
    for &t in new {
        out.push(t);
        if out.len() >= max_new || t == eos {
            return true;
        }
    }
    false
}

/// Alternates drafting and verification until `max_new` tokens or the end
/// token. The prompt forward yields the first token; every later token comes
/// from a verification cycle.
pub fn run_episode<D: DraftSource + ?Sized>(
    target: &ModelWeights,
    drafter: &mut D,
    prompt: &[u32],
    mode: DraftMode,
    sampler: &mut Sampler,
    max_new: usize,
) -> Result<Episode> {
    mode.shape().validate()?;
    if !sampler.is_greedy() && matches!(mode, DraftMode::Tree(_)) {
        return Err(Error::Config("sampling verification supports chain drafts only".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Dimension("empty prompt".into()));
    }
    target.check_tokens(prompt)?;
    let mut metrics = CycleMetrics::default();
    let mut out = Vec::new();
    let (mut snap, logits) = forward_full(target, prompt)?;
    if max_new == 0 {
        return Ok(Episode {
            tokens: out,
            metrics,
            snapshot: snap,
        });
    }
    let mut pending = sampler.pick(logits.row(prompt.len() - 1));
    let eos = target.config.eos_token;
    let calls_before = drafter.forward_calls();
    let mut done = push_output(&mut out, &[pending], max_new, eos);
    let mut start = 0;
    while !done {
        drafter.commit(&snap, start, pending)?;
        start = snap.len();
        let room = target.config.max_seq.checked_sub(start + 1).ok_or(Error::Capacity {
            requested: start + 1,
            max_seq: target.config.max_seq,
        })?;
        let depth = mode.shape().depth.min(room);
        let outcome = match sampler {
            Sampler::Greedy => {
                let tree = if depth == 0 {
                    DraftTree::default()
                } else {
                    build_tree(drafter, mode.clamped(depth))?
                };
                let o = verify_greedy(target, &mut snap, pending, &tree)?;
                metrics.record(tree.len(), o.accepted_count);
                let mut new: Vec<u32> = o.accepted_path.iter().map(|&i| tree.nodes[i].token).collect();
                new.push(o.bonus_token);
                done = push_output(&mut out, &new, max_new, eos);
                o
            }
            Sampler::Sample { rng, temperature } => {
                let chain = draft_chain_sampled(drafter, depth, *temperature, rng)?;
                let o = verify_sampling(target, &mut snap, pending, &chain, *temperature, rng)?;
                metrics.record(chain.tokens.len(), o.accepted_count);
                let mut new = chain.tokens[..o.accepted_count].to_vec();
                new.push(o.bonus_token);
                done = push_output(&mut out, &new, max_new, eos);
                o
            }
        };
        pending = outcome.bonus_token;
    }
    metrics.drafter_calls = drafter.forward_calls() - calls_before;
    Ok(Episode {
        tokens: out,
        metrics,
        snapshot: snap,
    })
}

#[cfg(test)]
mod tests;
