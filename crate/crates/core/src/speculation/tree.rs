use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::DraftSource;
use crate::error::{Error, Result};
use crate::numerics::log_softmax_row;

/// Breadth, depth and total token budget of a draft tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeShape {
    pub breadth: usize,
    pub depth: usize,
    pub budget: usize,
}

impl Default for TreeShape {
    fn default() -> Self {
        Self {
            breadth: 8,
            depth: 6,
            budget: 62,
        }
    }
}

impl TreeShape {
    pub fn chain(k: usize) -> Self {
        Self {
            breadth: 1,
            depth: k,
            budget: k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.breadth == 0 || self.depth == 0 || self.budget < self.breadth {
            return Err(Error::Config(format!(
                "tree shape needs breadth >= 1, depth >= 1 and budget >= breadth, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftNode {
    pub token: u32,
    /// `None` attaches the node to the pending token.
    pub parent: Option<usize>,
    pub depth: usize,
    pub logprob: f64,
    pub joint_logprob: f64,
}

/// Drafted tokens below the pending token, parents always listed first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DraftTree {
    pub nodes: Vec<DraftNode>,
}

impl DraftTree {
    /// Validates structure: parents precede children, depths follow parents,
    /// sibling tokens are distinct.
    pub fn from_nodes(nodes: Vec<DraftNode>) -> Result<Self> {
        let tree = Self { nodes };
        tree.check_structure()?;
        Ok(tree)
    }

    /// Chain of tokens with zero log-probabilities.
    pub fn chain(tokens: &[u32]) -> Self {
        let nodes = tokens
            .iter()
            .enumerate()
            .map(|(i, &token)| DraftNode {
                token,
                parent: i.checked_sub(1),
                depth: i + 1,
                logprob: 0.0,
                joint_logprob: 0.0,
            })
            .collect();
        Self { nodes }
    }

    /// Tree from `(token, parent)` pairs with unit depths derived from parents.
    pub fn from_parents(pairs: &[(u32, Option<usize>)]) -> Result<Self> {
        let mut nodes: Vec<DraftNode> = Vec::with_capacity(pairs.len());
        for (i, &(token, parent)) in pairs.iter().enumerate() {
            let depth = match parent {
                None => 1,
                Some(p) if p < i => nodes[p].depth + 1,
                Some(p) => {
                    return Err(Error::Structure(format!("node {i} has parent {p} not before it")));
                }
            };
            nodes.push(DraftNode {
                token,
                parent,
                depth,
                logprob: 0.0,
                joint_logprob: 0.0,
            });
        }
        Self::from_nodes(nodes)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    pub fn tokens(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.token).collect()
    }

    /// Node indices from the top of the tree down to `node`.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out.reverse();
        out
    }

    pub fn children(&self, parent: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == parent)
            .map(|(i, _)| i)
    }

    /// Nodes without children.
    pub fn leaves(&self) -> Vec<usize> {
        let mut has_child = vec![false; self.nodes.len()];
        for n in &self.nodes {
            if let Some(p) = n.parent {
                has_child[p] = true;
            }
        }
        (0..self.nodes.len()).filter(|&i| !has_child[i]).collect()
    }

    pub fn check_structure(&self) -> Result<()> {
        let mut siblings = HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let expected = match n.parent {
                None => 1,
                Some(p) if p < i => self.nodes[p].depth + 1,
                Some(p) => {
                    return Err(Error::Structure(format!("node {i} has parent {p} not before it")));
                }
            };
            if n.depth != expected {
                return Err(Error::Structure(format!(
                    "node {i} at depth {} under a parent at depth {}",
                    n.depth,
                    expected - 1
                )));
            }
            if !siblings.insert((n.parent, n.token)) {
                return Err(Error::Structure(format!(
                    "token {} drafted twice under the same parent",
                    n.token
                )));
            }
        }
        Ok(())
    }

    /// Structure plus the joint log-probability recurrence and shape limits.
    pub fn check_invariants(&self, shape: &TreeShape) -> Result<()> {
        self.check_structure()?;
        if self.nodes.len() > shape.budget || self.max_depth() > shape.depth {
            return Err(Error::Structure(format!(
                "{} nodes at depth {} exceed {shape:?}",
                self.nodes.len(),
                self.max_depth()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let base = n.parent.map_or(0.0, |p| self.nodes[p].joint_logprob);
            if (base + n.logprob - n.joint_logprob).abs() > 1e-9 {
                return Err(Error::Structure(format!("node {i} breaks the joint log-probability recurrence")));
            }
        }
        Ok(())
    }
}

/// The `k` most probable entries, ties to the lowest id.
pub fn top_k(logprobs: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<usize> = (0..logprobs.len()).collect();
    idx.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.into_iter().map(|i| (i as u32, logprobs[i])).collect()
}

struct Candidate {
    token: u32,
    parent: Option<usize>,
    depth: usize,
    logprob: f64,
    joint: f64,
    handle: Option<usize>,
}

/// Dynamic draft tree: beam of width `breadth` over joint probability, then
/// the `budget` best nodes among every expanded candidate.
pub fn build_tree<D: DraftSource + ?Sized>(src: &mut D, shape: TreeShape) -> Result<DraftTree> {
    shape.validate()?;
    let root = log_softmax_row(&src.root()?);
    let mut pool: Vec<Candidate> = top_k(&root, shape.breadth)
        .into_iter()
        .map(|(token, lp)| Candidate {
            token,
            parent: None,
            depth: 1,
            logprob: lp,
            joint: lp,
            handle: None,
        })
        .collect();
    let mut live: Vec<usize> = (0..pool.len()).collect();
    for depth in 2..=shape.depth {
        let first_new = pool.len();
        for &i in &live {
            let parent_handle = match pool[i].parent {
                None => super::ROOT_HANDLE,
                Some(p) => pool[p].handle.expect("expanded parent"),
            };
            let (h, logits) = src.extend(parent_handle, pool[i].token)?;
            pool[i].handle = Some(h);
            let joint = pool[i].joint;
            for (token, lp) in top_k(&log_softmax_row(&logits), shape.breadth) {
                pool.push(Candidate {
                    token,
                    parent: Some(i),
                    depth,
                    logprob: lp,
                    joint: joint + lp,
                    handle: None,
                });
            }
        }
        let mut level: Vec<usize> = (first_new..pool.len()).collect();
        level.sort_by(|&a, &b| pool[b].joint.total_cmp(&pool[a].joint).then(a.cmp(&b)));
        level.truncate(shape.breadth);
        level.sort_unstable();
        live = level;
    }
    let keep = select_closed(&pool, shape.budget);
    let mut remap = vec![usize::MAX; pool.len()];
    let mut nodes = Vec::with_capacity(keep.len());
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
        let c = &pool[old];
        nodes.push(DraftNode {
            token: c.token,
            parent: c.parent.map(|p| remap[p]),
            depth: c.depth,
            logprob: c.logprob,
            joint_logprob: c.joint,
        });
    }
    DraftTree::from_nodes(nodes)
}

/// Best `budget` candidates by joint probability, repaired so every kept
/// node's ancestors are kept; returned in pool order.
fn select_closed(pool: &[Candidate], budget: usize) -> Vec<usize> {
    let mut ranked: Vec<usize> = (0..pool.len()).collect();
    ranked.sort_by(|&a, &b| pool[b].joint.total_cmp(&pool[a].joint).then(a.cmp(&b)));
    let rank: Vec<usize> = {
        let mut r = vec![0; pool.len()];
        for (pos, &i) in ranked.iter().enumerate() {
            r[i] = pos;
        }
        r
    };
    let mut kept: HashSet<usize> = ranked.iter().take(budget).copied().collect();
    loop {
        let missing = kept
            .iter()
            .filter_map(|&i| pool[i].parent.filter(|p| !kept.contains(p)))
            .min_by_key(|&p| rank[p]);
        let Some(parent) = missing else { break };
        kept.insert(parent);
        if kept.len() > budget {
            let drop = kept
                .iter()
                .copied()
                .filter(|&i| i != parent && !kept.iter().any(|&c| pool[c].parent == Some(i)))
                .max_by_key(|&i| rank[i]);
            if let Some(d) = drop {
                kept.remove(&d);
            }
        }
    }
    let mut out: Vec<usize> = kept.into_iter().collect();
    out.sort_unstable();
    out
}
