use serde::{Deserialize, Serialize};

use super::netsim::{LinkStats, NetworkProfile, NetworkSim};
use super::wire::{decode_draft, encode_draft, feed_from_blocks, BootstrapMessage, PayloadLayout, VerifyMessage};
use crate::drafters::{DraftModel, DraftState, TargetFeed};
use crate::error::{Error, Result};
use crate::numerics::{argmax, Tensor};
use crate::speculation::{build_tree, verify_greedy, CycleMetrics, DraftMode, DraftSource, DraftTree};
use crate::target_model::{forward_full, ModelWeights, StateSnapshot};

/// Target side: verifies drafts and ships activations for verified rows.
#[derive(Debug)]
pub struct Server<'a> {
    target: &'a ModelWeights,
    drafter: &'a DraftModel,
    layout: PayloadLayout,
    snap: StateSnapshot,
    pending: Option<u32>,
    verify_calls: usize,
}

impl<'a> Server<'a> {
    pub fn new(target: &'a ModelWeights, drafter: &'a DraftModel) -> Self {
        Self {
            target,
            drafter,
            layout: PayloadLayout::for_drafter(drafter),
            snap: target.empty_snapshot(),
            pending: None,
            verify_calls: 0,
        }
    }

    pub fn verified_len(&self) -> usize {
        self.snap.len()
    }

    pub fn verify_calls(&self) -> usize {
        self.verify_calls
    }

    /// Prompt forward; returns the encoded BOOTSTRAP message.
    pub fn bootstrap(&mut self, prompt: &[u32]) -> Result<Vec<u8>> {
        if prompt.is_empty() {
            return Err(Error::Protocol("bootstrap needs a non-empty prompt".into()));
        }
        let (snap, logits) = forward_full(self.target, prompt)?;
        let first = argmax(logits.row(prompt.len() - 1)) as u32;
        let feed = self.drafter.build_feed(&snap, 0, snap.len())?;
        self.snap = snap;
        self.pending = Some(first);
        BootstrapMessage::from_feed(first, &feed, &self.layout)?.encode()
    }

    /// Greedy verification of one DRAFT message; returns the VERIFY reply.
    pub fn handle_draft(&mut self, bytes: &[u8]) -> Result<Vec<u8>> {
        let pending = self
            .pending
            .ok_or_else(|| Error::Protocol("draft received before bootstrap".into()))?;
        let tree = decode_draft(bytes)?;
        let start = self.snap.len();
        let outcome = verify_greedy(self.target, &mut self.snap, pending, &tree)?;
        self.verify_calls += 1;
        let mut tokens: Vec<u32> = outcome.accepted_path.iter().map(|&i| tree.nodes[i].token).collect();
        tokens.push(outcome.bonus_token);
        let feed = self.drafter.build_feed(&self.snap, start, self.snap.len())?;
        self.pending = Some(outcome.bonus_token);
        VerifyMessage::from_feed(tokens, &feed, &self.layout)?.encode()
    }
}

/// One commit applied to the client's drafter state.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitRecord {
    pub tokens: Vec<u32>,
    pub feed: TargetFeed,
    pub pending: u32,
}

/// Drafting side: owns the drafter state built from received activations.
#[derive(Debug, Clone)]
pub struct Client<'m> {
    model: &'m DraftModel,
    pub state: DraftState,
    layout: PayloadLayout,
    pub history: Vec<CommitRecord>,
}

struct ClientSource<'c, 'm> {
    model: &'m DraftModel,
    state: &'c mut DraftState,
}

impl DraftSource for ClientSource<'_, '_> {
    fn commit(&mut self, _: &StateSnapshot, _: usize, _: u32) -> Result<()> {
        Err(Error::Protocol("client state is committed from verify messages".into()))
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

impl<'m> Client<'m> {
    pub fn new(model: &'m DraftModel) -> Self {
        Self {
            model,
            state: model.new_state(),
            layout: PayloadLayout::for_drafter(model),
            history: Vec::new(),
        }
    }

    pub fn layout(&self) -> &PayloadLayout {
        &self.layout
    }

    fn commit(&mut self, tokens: Vec<u32>, feed: TargetFeed, pending: u32) -> Result<()> {
        self.state.commit(self.model, &tokens, &feed, pending)?;
        self.history.push(CommitRecord { tokens, feed, pending });
        Ok(())
    }

    /// Applies a BOOTSTRAP for `prompt`; returns the first target token.
    pub fn receive_bootstrap(&mut self, prompt: &[u32], bytes: &[u8]) -> Result<u32> {
        let msg = BootstrapMessage::decode(bytes, &self.layout)?;
        if msg.prompt_len != prompt.len() {
            return Err(Error::Session(format!(
                "bootstrap covers {} tokens but the prompt has {}",
                msg.prompt_len,
                prompt.len()
            )));
        }
        let feed = feed_from_blocks(msg.prompt_len, &msg.blocks)?;
        self.commit(prompt.to_vec(), feed, msg.first_token)?;
        Ok(msg.first_token)
    }

    /// Drafts the next tree within the remaining sequence room.
    pub fn draft(&mut self, mode: DraftMode) -> Result<DraftTree> {
        let max_seq = self.model.target.config.max_seq;
        let next = self.state.verified_len() + 1;
        let room = max_seq.checked_sub(next).ok_or(Error::Capacity {
            requested: next,
            max_seq,
        })?;
        let depth = mode.shape().depth.min(room);
        if depth == 0 {
            return Ok(DraftTree::default());
        }
        let mut src = ClientSource {
            model: self.model,
            state: &mut self.state,
        };
        build_tree(&mut src, mode.clamped(depth))
    }

    /// Applies a VERIFY reply to `tree`; returns the newly verified tokens
    /// (accepted drafts and the bonus token).
    pub fn receive_verify(&mut self, tree: &DraftTree, bytes: &[u8]) -> Result<VerifyMessage> {
        let msg = VerifyMessage::decode(bytes, &self.layout)?;
        let (bonus, accepted) = msg.tokens.split_last().expect("decode rejects empty token lists");
        let mut parent = None;
        for &tok in accepted {
            parent = Some(
                tree.children(parent)
                    .find(|&c| tree.nodes[c].token == tok)
                    .ok_or_else(|| Error::Session(format!("verified token {tok} is not on a drafted path")))?,
            );
        }
        let pending = self
            .state
            .pending()
            .ok_or_else(|| Error::Protocol("verify received before bootstrap".into()))?;
        let mut tokens = vec![pending];
        tokens.extend_from_slice(accepted);
        let feed = feed_from_blocks(tokens.len(), &msg.blocks)?;
        self.commit(tokens, feed, *bonus)?;
        Ok(msg)
    }

    /// Drafter-only greedy continuation of `count` tokens.
    pub fn continue_offline(&mut self, count: usize) -> Result<Vec<u32>> {
        let eos = self.model.target.config.eos_token;
        self.state.continue_greedy(self.model, count, Some(eos))
    }
}

/// Rebuilds a fresh drafter state from the commit history in one batched
/// commit and continues greedily.
pub fn standalone_continuation(model: &DraftModel, history: &[CommitRecord], count: usize) -> Result<Vec<u32>> {
    let last = history
        .last()
        .ok_or_else(|| Error::Protocol("no committed state to continue from".into()))?;
    let tokens: Vec<u32> = history.iter().flat_map(|c| c.tokens.iter().copied()).collect();
    let widths = model.feed_widths();
    let blocks = widths
        .iter()
        .enumerate()
        .map(|(b, &w)| {
            let data: Vec<f32> = history
                .iter()
                .flat_map(|c| c.feed.blocks[b].data().iter().copied())
                .collect();
            Tensor::new(vec![tokens.len(), w], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let feed = TargetFeed {
        rows: tokens.len(),
        blocks,
    };
    let mut state = model.new_state();
    state.commit(model, &tokens, &feed, last.pending)?;
    state.continue_greedy(model, count, Some(model.target.config.eos_token))
}

/// Message path between client and server.
pub trait Link {
    fn bootstrap(&mut self) -> Result<Vec<u8>>;
    fn exchange(&mut self, draft: &[u8]) -> Result<Vec<u8>>;
    /// Tears the connection down; later calls fail.
    fn close(&mut self);
    /// Round trips attempted so far, including after close.
    fn calls(&self) -> usize;
    fn server_verified_len(&self) -> Option<usize>;
    fn server_verify_calls(&self) -> usize;
    fn stats(&self) -> LinkStats {
        LinkStats::default()
    }
    fn virtual_time_s(&self) -> f64 {
        0.0
    }
}

/// In-process link over the simulated network.
#[derive(Debug)]
pub struct SimLink<'a> {
    server: Server<'a>,
    prompt: Vec<u32>,
    net: NetworkSim,
    clock: f64,
    calls: usize,
    open: bool,
}

impl<'a> SimLink<'a> {
    pub fn new(server: Server<'a>, prompt: &[u32], net: NetworkSim) -> Self {
        Self {
            server,
            prompt: prompt.to_vec(),
            net,
            clock: 0.0,
            calls: 0,
            open: true,
        }
    }

    fn check_open(&mut self) -> Result<()> {
        self.calls += 1;
        if self.open {
            Ok(())
        } else {
            Err(Error::Session("link is closed".into()))
        }
    }
}

impl Link for SimLink<'_> {
    fn bootstrap(&mut self) -> Result<Vec<u8>> {
        self.check_open()?;
        let msg = self.server.bootstrap(&self.prompt)?;
        let t = self.net.transfer(msg.len(), self.clock)?;
        self.clock = t.delivered_at.max(t.acked_at);
        Ok(msg)
    }

    fn exchange(&mut self, draft: &[u8]) -> Result<Vec<u8>> {
        self.check_open()?;
        let up = self.net.transfer(draft.len(), self.clock)?;
        let reply = self.server.handle_draft(draft)?;
        let down = self.net.transfer(reply.len(), up.delivered_at)?;
        self.clock = up.acked_at.max(down.delivered_at).max(down.acked_at);
        Ok(reply)
    }

    fn close(&mut self) {
        self.open = false;
    }

    fn calls(&self) -> usize {
        self.calls
    }

    fn server_verified_len(&self) -> Option<usize> {
        Some(self.server.verified_len())
    }

    fn server_verify_calls(&self) -> usize {
        self.server.verify_calls()
    }

    fn stats(&self) -> LinkStats {
        self.net.stats
    }

    fn virtual_time_s(&self) -> f64 {
        self.clock
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub mode: DraftMode,
    pub max_new: usize,
    /// Cut the link once this many tokens are committed.
    pub disconnect_after: Option<usize>,
}

/// Element counts of one cycle in the units of the message-size table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleAccounting {
    pub drafted: usize,
    /// Accepted drafts plus the bonus token.
    pub verified: usize,
    pub up_units: usize,
    pub down_units: usize,
    pub up_bytes: usize,
    pub down_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub bootstrap_bytes: usize,
    pub bootstrap_raw_bytes: usize,
    pub target_calls: usize,
    pub cycles: CycleMetrics,
    pub accounting: Vec<CycleAccounting>,
    pub link: LinkStats,
    pub virtual_time_s: f64,
    /// Output length when the link was cut.
    pub cut_at: Option<usize>,
    pub offline_tokens: usize,
    pub calls_after_cut: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub tokens: Vec<u32>,
    pub metrics: SessionMetrics,
}

fn push_output(out: &mut Vec<u32>, new: &[u32], max_new: usize, eos: u32) -> bool {
    crate::speculation::push_output(out, new, max_new, eos)
}

/// Drives a client over `link` until `max_new` tokens, the end token, or a
/// disconnection followed by offline continuation.
pub fn run_session(client: &mut Client<'_>, link: &mut dyn Link, prompt: &[u32], cfg: &SessionConfig) -> Result<SessionOutcome> {
    cfg.mode.shape().validate()?;
    let eos = client.model.target.config.eos_token;
    let max_seq = client.model.target.config.max_seq;
    let mut m = SessionMetrics::default();
    let mut out = Vec::new();
    if cfg.max_new == 0 {
        return Ok(SessionOutcome { tokens: out, metrics: m });
    }
    let boot = link.bootstrap()?;
    m.bootstrap_bytes = boot.len();
    m.bytes_down += boot.len();
    let first = client.receive_bootstrap(prompt, &boot)?;
    m.bootstrap_raw_bytes = BootstrapMessage::decode(&boot, client.layout())?.raw_len()?;
    check_sync(client, link)?;
    let mut done = push_output(&mut out, &[first], cfg.max_new, eos);
    let drafter_before = client.state.forward_calls();
    while !done {
        if cfg.disconnect_after.is_some_and(|b| out.len() >= b) {
            link.close();
            let calls = link.calls();
            m.cut_at = Some(out.len());
            let room = max_seq.saturating_sub(client.state.verified_len());
            let rest = client.continue_offline((cfg.max_new - out.len()).min(room))?;
            m.offline_tokens = rest.len();
            push_output(&mut out, &rest, cfg.max_new, eos);
            m.calls_after_cut = link.calls() - calls;
            break;
        }
        let tree = client.draft(cfg.mode)?;
        let up = encode_draft(&tree)?;
        let down = link.exchange(&up)?;
        let msg = client.receive_verify(&tree, &down)?;
        check_sync(client, link)?;
        let a = msg.tokens.len();
        m.cycles.record(tree.len(), a - 1);
        m.accounting.push(CycleAccounting {
            drafted: tree.len(),
            verified: a,
            up_units: up.len() - 2,
            down_units: 3 * a + msg.activation_elements(),
            up_bytes: up.len(),
            down_bytes: down.len(),
        });
        m.bytes_up += up.len();
        m.bytes_down += down.len();
        done = push_output(&mut out, &msg.tokens, cfg.max_new, eos);
    }
    m.cycles.drafter_calls = client.state.forward_calls() - drafter_before;
    m.target_calls = link.server_verify_calls();
    m.link = link.stats();
    m.virtual_time_s = link.virtual_time_s();
    Ok(SessionOutcome { tokens: out, metrics: m })
}

fn check_sync(client: &Client<'_>, link: &dyn Link) -> Result<()> {
    match link.server_verified_len() {
        Some(n) if n != client.state.verified_len() => Err(Error::Session(format!(
            "state divergence: server verified {n} tokens, client {}",
            client.state.verified_len()
        ))),
        _ => Ok(()),
    }
}

/// Client-server session over the simulated network.
pub fn simulate_session(
    target: &ModelWeights,
    drafter: &DraftModel,
    profile: &NetworkProfile,
    seed: u64,
    prompt: &[u32],
    cfg: &SessionConfig,
) -> Result<SessionOutcome> {
    let mut link = SimLink::new(Server::new(target, drafter), prompt, NetworkSim::new(profile.clone(), seed)?);
    let mut client = Client::new(drafter);
    run_session(&mut client, &mut link, prompt, cfg)
}
