use std::rc::Rc;

use super::net::DrafterNet;
use super::{DraftModel, TargetFeed};
use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Graph, Var};
use crate::target_model::append_mask;

pub type SlotId = usize;

/// The slot holding the pending (verified but not yet processed) token.
pub const ROOT_SLOT: SlotId = 0;

type KvRows = (Vec<f32>, Vec<f32>);

#[derive(Debug, Clone)]
struct Slot {
    parent: Option<SlotId>,
    token: u32,
    pos: usize,
    self_kv: Vec<KvRows>,
    top_kv: Vec<KvRows>,
    predicted: Vec<f32>,
}

/// Drafting-side state: caches over verified tokens plus the current draft
/// slots. Slot `ROOT_SLOT` is the pending token; every other slot extends a
/// parent slot by one drafted token.
#[derive(Debug, Clone)]
pub struct DraftState {
    tokens: Vec<u32>,
    pending: Option<u32>,
    self_kv: Vec<KvRows>,
    self_width: usize,
    memory_kv: KvRows,
    memory_width: usize,
    top_kv: Vec<KvRows>,
    top_width: usize,
    last_tap: Vec<f32>,
    slots: Vec<Slot>,
    forward_calls: usize,
}

impl DraftState {
    pub(crate) fn new(model: &DraftModel) -> Self {
        let t = &model.target.config;
        let (layers, self_width, memory_width) = match &model.net {
            DrafterNet::Moa(m) => (1, m.sa.dims.kv_width, m.ca.dims.kv_width),
            DrafterNet::Eagle(e) => (1, e.layer.dims.kv_width, 0),
            DrafterNet::Independent(n) => (n.layers.len(), n.layers[0].dims.kv_width, 0),
        };
        Self {
            tokens: Vec::new(),
            pending: None,
            self_kv: vec![(Vec::new(), Vec::new()); layers],
            self_width,
            memory_kv: (Vec::new(), Vec::new()),
            memory_width,
            top_kv: vec![(Vec::new(), Vec::new()); model.config.n],
            top_width: t.kv_embed,
            last_tap: vec![0.0; t.embed],
            slots: Vec::new(),
            forward_calls: 0,
        }
    }

    pub fn verified_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn verified_tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn pending(&self) -> Option<u32> {
        self.pending
    }

    /// Drafter forward passes run since creation.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_token(&self, id: SlotId) -> u32 {
        self.slots[id].token
    }

    pub fn slot_parent(&self, id: SlotId) -> Option<SlotId> {
        self.slots[id].parent
    }

    /// Number of drafted rows (slot-level top-layer caches) currently held.
    pub fn drafted_top_rows(&self) -> usize {
        self.slots.iter().filter(|s| !s.top_kv.is_empty()).count()
    }

    pub fn clear_drafts(&mut self) {
        self.slots.clear();
    }

    /// Commits newly verified `tokens` (the previous pending token followed by
    /// the accepted drafts) with their target feed, and sets the next pending
    /// token. All draft slots are discarded.
    pub fn commit(&mut self, model: &DraftModel, tokens: &[u32], feed: &TargetFeed, pending: u32) -> Result<()> {
        if tokens.is_empty() || feed.rows != tokens.len() {
            return Err(Error::Protocol(format!(
                "feed of {} rows for {} verified tokens",
                feed.rows,
                tokens.len()
            )));
        }
        let widths = model.feed_widths();
        if feed.blocks.len() != widths.len()
            || feed
                .blocks
                .iter()
                .zip(&widths)
                .any(|(b, &w)| b.cols() != w || b.rows() != feed.rows)
        {
            return Err(Error::Protocol(format!(
                "feed layout does not match variant {} with n={}",
                model.variant(),
                model.config.n
            )));
        }
        if let Some(p) = self.pending {
            if tokens[0] != p {
                return Err(Error::Drafting(format!(
                    "verified tokens start with {} but pending token is {p}",
                    tokens[0]
                )));
            }
        }
        model.target.check_tokens(tokens)?;
        model.target.check_tokens(&[pending])?;
        self.clear_drafts();
        let t0 = self.tokens.len();
        let n = tokens.len();
        let positions: Vec<usize> = (t0..t0 + n).collect();
        let mask = Rc::new(append_mask(t0, n)?);
        let target = &*model.target;
        let mut g: Graph<f32> = Graph::no_grad();
        let self_past = self.self_past(&mut g, &[])?;
        let new_kv: Vec<(Var, Var)> = match &model.net {
            DrafterNet::Moa(moa) => {
                let x = target.embed(&mut g, tokens)?;
                let rope = crate::nn::Rope {
                    positions: &positions,
                    base: target.config.rope_base,
                };
                let b = moa.sa.forward(&mut g, x, Some(rope), self_past[0], &mask)?;
                let mem = g.input(feed.blocks[0].clone());
                let (mk, mv) = moa.ca.memory_kv(&mut g, mem)?;
                self.memory_kv.0.extend_from_slice(g.value(mk).data());
                self.memory_kv.1.extend_from_slice(g.value(mv).data());
                let kv = target.config.kv_embed;
                for (store, block) in self.top_kv.iter_mut().zip(&feed.blocks[1..]) {
                    for r in 0..n {
                        let row = block.row(r);
                        store.0.extend_from_slice(&row[..kv]);
                        store.1.extend_from_slice(&row[kv..]);
                    }
                }
                vec![(b.keys, b.values)]
            }
            DrafterNet::Eagle(e) => {
                let taps = &feed.blocks[0];
                let mut prev = self.last_tap.clone();
                for r in 0..n - 1 {
                    prev.extend_from_slice(taps.row(r));
                }
                let prev = g.input_rows(n, target.config.embed, &prev)?;
                let emb = target.embed(&mut g, tokens)?;
                let (_, k, v) = model.eagle_step(&mut g, e, prev, emb, &positions, self_past[0], &mask)?;
                self.last_tap = taps.row(n - 1).to_vec();
                vec![(k, v)]
            }
            DrafterNet::Independent(net) => {
                let x = target.embed(&mut g, tokens)?;
                model.independent_stack(&mut g, net, x, &positions, &self_past, &mask)?.1
            }
        };
        for (store, (k, v)) in self.self_kv.iter_mut().zip(new_kv) {
            store.0.extend_from_slice(g.value(k).data());
            store.1.extend_from_slice(g.value(v).data());
        }
        self.tokens.extend_from_slice(tokens);
        self.pending = Some(pending);
        Ok(())
    }

    /// Past key/value rows of each drafter self-attention layer: verified rows
    /// followed by the rows of `ancestors`.
    fn self_past(&self, g: &mut Graph<'_, f32>, ancestors: &[SlotId]) -> Result<Vec<Option<(Var, Var)>>> {
        (0..self.self_kv.len())
            .map(|i| {
                let (mut k, mut v) = self.self_kv[i].clone();
                for &a in ancestors {
                    k.extend_from_slice(&self.slots[a].self_kv[i].0);
                    v.extend_from_slice(&self.slots[a].self_kv[i].1);
                }
                let rows = k.len() / self.self_width;
                if rows == 0 {
                    return Ok(None);
                }
                Ok(Some((
                    g.input_rows(rows, self.self_width, &k)?,
                    g.input_rows(rows, self.self_width, &v)?,
                )))
            })
            .collect()
    }

    fn top_past(&self, g: &mut Graph<'_, f32>, ancestors: &[SlotId]) -> Result<Vec<Option<(Var, Var)>>> {
        (0..self.top_kv.len())
            .map(|i| {
                let (mut k, mut v) = self.top_kv[i].clone();
                for &a in ancestors {
                    k.extend_from_slice(&self.slots[a].top_kv[i].0);
                    v.extend_from_slice(&self.slots[a].top_kv[i].1);
                }
                let rows = k.len() / self.top_width;
                if rows == 0 {
                    return Ok(None);
                }
                Ok(Some((
                    g.input_rows(rows, self.top_width, &k)?,
                    g.input_rows(rows, self.top_width, &v)?,
                )))
            })
            .collect()
    }

    fn ancestors(&self, parent: Option<SlotId>) -> Vec<SlotId> {
        let mut chain = Vec::new();
        let mut cur = parent;
        while let Some(p) = cur {
            chain.push(p);
            cur = self.slots[p].parent;
        }
        chain.reverse();
        chain
    }

    /// Logits for the token after the pending one (creates the root slot).
    pub fn root(&mut self, model: &DraftModel) -> Result<Vec<f32>> {
        let pending = self
            .pending
            .ok_or_else(|| Error::Protocol("no pending token; bootstrap missing".into()))?;
        self.slots.clear();
        let (slot, logits) = self.forward_slot(model, None, pending)?;
        self.slots.push(slot);
        Ok(logits)
    }

    /// Drafts `token` as a child of `parent`, returning the new slot and the
    /// logits for the token after it.
    pub fn extend(&mut self, model: &DraftModel, parent: SlotId, token: u32) -> Result<(SlotId, Vec<f32>)> {
        if parent >= self.slots.len() {
            return Err(Error::Structure(format!(
                "parent slot {parent} of {}",
                self.slots.len()
            )));
        }
        let (slot, logits) = self.forward_slot(model, Some(parent), token)?;
        self.slots.push(slot);
        Ok((self.slots.len() - 1, logits))
    }

    fn forward_slot(&mut self, model: &DraftModel, parent: Option<SlotId>, token: u32) -> Result<(Slot, Vec<f32>)> {
        let target = &*model.target;
        target.check_tokens(&[token])?;
        let pos = parent.map_or(self.tokens.len(), |p| self.slots[p].pos + 1);
        if pos >= target.config.max_seq {
            return Err(Error::Capacity {
                requested: pos + 1,
                max_seq: target.config.max_seq,
            });
        }
        let ancestors = self.ancestors(parent);
        let seen = self.tokens.len() + ancestors.len();
        let mask = Rc::new(AttentionMask::full(1, seen + 1)?);
        let positions = [pos];
        let mut g: Graph<f32> = Graph::no_grad();
        let self_past = self.self_past(&mut g, &ancestors)?;
        let mut top_kv = Vec::new();
        let (predicted, logits, self_new) = match &model.net {
            DrafterNet::Moa(moa) => {
                let t = self.tokens.len();
                if t == 0 {
                    return Err(Error::Protocol(
                        "aggregated target cache is empty; prompt bootstrap missing".into(),
                    ));
                }
                let x = target.embed(&mut g, &[token])?;
                let rope = crate::nn::Rope {
                    positions: &positions,
                    base: target.config.rope_base,
                };
                let b = moa.sa.forward(&mut g, x, Some(rope), self_past[0], &mask)?;
                let mk = g.input_rows(t, self.memory_width, &self.memory_kv.0)?;
                let mv = g.input_rows(t, self.memory_width, &self.memory_kv.1)?;
                let ca_mask = Rc::new(AttentionMask::full(1, t)?);
                let predicted = moa.ca.forward(&mut g, b.out, (mk, mv), &ca_mask)?;
                let n = model.config.n;
                let logits = if n == 0 {
                    target.head(&mut g, predicted)?
                } else {
                    let past = self.top_past(&mut g, &ancestors)?;
                    let first = target.config.layers - n;
                    let (_, out, blocks) = target.run_layers(&mut g, predicted, first, &positions, &past, &mask)?;
                    top_kv = blocks
                        .iter()
                        .map(|b| (g.value(b.keys).data().to_vec(), g.value(b.values).data().to_vec()))
                        .collect();
                    target.head(&mut g, out)?
                };
                (predicted, logits, vec![(b.keys, b.values)])
            }
            DrafterNet::Eagle(e) => {
                let prev_data = match parent {
                    Some(p) => self.slots[p].predicted.clone(),
                    None => self.last_tap.clone(),
                };
                let prev = g.input_rows(1, target.config.embed, &prev_data)?;
                let emb = target.embed(&mut g, &[token])?;
                let (out, k, v) = model.eagle_step(&mut g, e, prev, emb, &positions, self_past[0], &mask)?;
                let logits = target.head(&mut g, out)?;
                (out, logits, vec![(k, v)])
            }
            DrafterNet::Independent(net) => {
                let x = target.embed(&mut g, &[token])?;
                let (out, kv) = model.independent_stack(&mut g, net, x, &positions, &self_past, &mask)?;
                let logits = target.head(&mut g, out)?;
                (out, logits, kv)
            }
        };
        self.forward_calls += 1;
        let slot = Slot {
            parent,
            token,
            pos,
            self_kv: self_new
                .iter()
                .map(|&(k, v)| (g.value(k).data().to_vec(), g.value(v).data().to_vec()))
                .collect(),
            top_kv,
            predicted: g.value(predicted).data().to_vec(),
        };
        Ok((slot, g.value(logits).data().to_vec()))
    }

    /// Greedy chain continuation from the pending token using the drafter
    /// alone: `count` tokens, stopping early after `eos` if given.
    pub fn continue_greedy(&mut self, model: &DraftModel, count: usize, eos: Option<u32>) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return Ok(out);
        }
        let mut logits = self.root(model)?;
        let mut slot = ROOT_SLOT;
        loop {
            let tok = crate::numerics::argmax(&logits) as u32;
            out.push(tok);
            if out.len() == count || Some(tok) == eos {
                return Ok(out);
            }
            let (s, l) = self.extend(model, slot, tok)?;
            slot = s;
            logits = l;
        }
    }
}
