use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tree::DraftTree;
use crate::error::{Error, Result};
use crate::numerics::{argmax, AttentionMask};
use crate::target_model::{append_mask, probabilities, sample_index, ModelWeights, StateSnapshot};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    /// Accepted node indices from the top of the tree down.
    pub accepted_path: Vec<usize>,
    pub accepted_count: usize,
    /// Target token following the accepted drafts; becomes the next pending token.
    pub bonus_token: u32,
    pub tokens_appended: usize,
}

impl VerificationOutcome {
    fn new(accepted_path: Vec<usize>, bonus_token: u32) -> Self {
        let a = accepted_path.len();
        Self {
            accepted_path,
            accepted_count: a,
            bonus_token,
            tokens_appended: a + 1,
        }
    }
}

/// Tree-attention mask over `[cache ; pending ; nodes]`: each row sees the
/// cache, the pending row and its own ancestors.
pub fn tree_mask(cached: usize, tree: &DraftTree) -> Result<AttentionMask> {
    let rows = tree.len() + 1;
    let mut visible = vec![vec![false; rows]; rows];
    visible[0][0] = true;
    for (i, n) in tree.nodes.iter().enumerate() {
        let parent_row = n.parent.map_or(0, |p| p + 1);
        let (head, tail) = visible.split_at_mut(i + 1);
        tail[0].copy_from_slice(&head[parent_row]);
        tail[0][i + 1] = true;
    }
    AttentionMask::from_fn(rows, cached + rows, |i, j| j < cached || visible[i][j - cached])
}

/// Scores the pending token and every tree node in one target forward, accepts
/// the longest root chain matching the target argmax, and commits the pending
/// token plus the accepted drafts to `snap`.
pub fn verify_greedy(
    target: &ModelWeights,
    snap: &mut StateSnapshot,
    pending: u32,
    tree: &DraftTree,
) -> Result<VerificationOutcome> {
    tree.check_structure()?;
    let mut tokens = Vec::with_capacity(tree.len() + 1);
    tokens.push(pending);
    tokens.extend(tree.nodes.iter().map(|n| n.token));
    target.check_tokens(&tokens)?;
    let t = snap.len();
    let positions: Vec<usize> = std::iter::once(t)
        .chain(tree.nodes.iter().map(|n| t + n.depth))
        .collect();
    let out = target.forward_rows(&snap.cache, &tokens, &positions, &tree_mask(t, tree)?)?;
    let mut path = Vec::new();
    let mut row = 0;
    let mut parent = None;
    let bonus = loop {
        let best = argmax(out.logits.row(row)) as u32;
        match tree.children(parent).find(|&c| tree.nodes[c].token == best) {
            Some(c) => {
                path.push(c);
                parent = Some(c);
                row = c + 1;
            }
            None => break best,
        }
    };
    let rows: Vec<usize> = std::iter::once(0).chain(path.iter().map(|&c| c + 1)).collect();
    let committed: Vec<u32> = rows.iter().map(|&r| tokens[r]).collect();
    snap.append_rows(&out, &rows, &committed)?;
    Ok(VerificationOutcome::new(path, bonus))
}

/// Chain drafted by sampling, with the drafter distribution used at each step.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledChain {
    pub tokens: Vec<u32>,
    pub q: Vec<Vec<f64>>,
}

/// `min(1, p(x) / q(x))`; a drafted token the drafter gave zero mass is a
/// contract violation.
pub fn acceptance_probability(p: &[f64], q: &[f64], token: u32) -> Result<f64> {
    let x = token as usize;
    if x >= p.len() || x >= q.len() {
        return Err(Error::Bounds {
            token,
            vocab: p.len().min(q.len()),
        });
    }
    if q[x] <= 0.0 {
        return Err(Error::Drafting(format!(
            "drafted token {token} has zero drafter probability"
        )));
    }
    Ok((p[x] / q[x]).min(1.0))
}

/// `normalize(max(0, p - q))`, falling back to `p` when the two coincide.
pub fn residual_distribution(p: &[f64], q: &[f64]) -> Vec<f64> {
    let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let z: f64 = r.iter().sum();
    if z <= 0.0 {
        return p.to_vec();
    }
    r.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    Rejected(u32),
}

/// One rejection-sampling step for drafted `token`.
pub fn speculative_step<R: Rng + ?Sized>(p: &[f64], q: &[f64], token: u32, rng: &mut R) -> Result<StepOutcome> {
    let accept = acceptance_probability(p, q, token)?;
    let u: f64 = rng.gen();
    if u < accept {
        Ok(StepOutcome::Accepted)
    } else {
        Ok(StepOutcome::Rejected(sample_index(rng, &residual_distribution(p, q)) as u32))
    }
}

/// Rejection-sampling verification of a sampled chain at `temperature`.
pub fn verify_sampling<R: Rng + ?Sized>(
    target: &ModelWeights,
    snap: &mut StateSnapshot,
    pending: u32,
    chain: &SampledChain,
    temperature: f64,
    rng: &mut R,
) -> Result<VerificationOutcome> {
    if chain.q.len() != chain.tokens.len() {
        return Err(Error::Drafting(format!(
            "{} drafted tokens with {} recorded distributions",
            chain.tokens.len(),
            chain.q.len()
        )));
    }
    let mut tokens = vec![pending];
    tokens.extend_from_slice(&chain.tokens);
    target.check_tokens(&tokens)?;
    let t = snap.len();
    let positions: Vec<usize> = (t..t + tokens.len()).collect();
    let out = target.forward_rows(&snap.cache, &tokens, &positions, &append_mask(t, tokens.len())?)?;
    let mut accepted = 0;
    let mut bonus = None;
    for (i, (&x, q)) in chain.tokens.iter().zip(&chain.q).enumerate() {
        let p = probabilities(out.logits.row(i), temperature);
        match speculative_step(&p, q, x, rng)? {
            StepOutcome::Accepted => accepted += 1,
            StepOutcome::Rejected(y) => {
                bonus = Some(y);
                break;
            }
        }
    }
    let bonus = match bonus {
        Some(b) => b,
        None => {
            let p = probabilities(out.logits.row(accepted), temperature);
            sample_index(rng, &p) as u32
        }
    };
    let rows: Vec<usize> = (0..=accepted).collect();
    snap.append_rows(&out, &rows, &tokens[..=accepted])?;
    Ok(VerificationOutcome::new((0..accepted).collect(), bonus))
}
