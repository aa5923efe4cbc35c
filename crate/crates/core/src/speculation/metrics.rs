use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub drafted: usize,
    pub accepted: usize,
}

/// Per-cycle draft/accept counts with running totals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycles: Vec<CycleRecord>,
    /// Verification forwards of the target.
    pub target_calls: usize,
    /// Sum of accepted drafts plus one bonus token per cycle.
    pub tokens_generated: usize,
    pub drafter_calls: usize,
}

/// One JSON-lines row; `cycle` is null on the summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub cycle: Option<usize>,
    pub drafted: usize,
    pub accepted: usize,
    pub calls: usize,
    pub tokens: usize,
    pub tau_accept: f64,
    pub tau_per_call: f64,
}

impl CycleMetrics {
    pub fn record(&mut self, drafted: usize, accepted: usize) {
        self.cycles.push(CycleRecord { drafted, accepted });
        self.target_calls += 1;
        self.tokens_generated += accepted + 1;
    }

    pub fn total_accepted(&self) -> usize {
        self.cycles.iter().map(|c| c.accepted).sum()
    }

    pub fn total_drafted(&self) -> usize {
        self.cycles.iter().map(|c| c.drafted).sum()
    }

    /// Mean accepted drafts per cycle.
    pub fn tau_accept(&self) -> f64 {
        if self.cycles.is_empty() {
            return 0.0;
        }
        self.total_accepted() as f64 / self.cycles.len() as f64
    }

    /// Mean tokens gained per target call (accepted plus bonus).
    pub fn tau_per_call(&self) -> f64 {
        if self.cycles.is_empty() {
            return 0.0;
        }
        self.tokens_generated as f64 / self.cycles.len() as f64
    }

    pub fn merge(&mut self, other: &CycleMetrics) {
        self.cycles.extend_from_slice(&other.cycles);
        self.target_calls += other.target_calls;
        self.tokens_generated += other.tokens_generated;
        self.drafter_calls += other.drafter_calls;
    }

    pub fn lines(&self) -> Vec<MetricsLine> {
        let mut out = Vec::with_capacity(self.cycles.len() + 1);
        let (mut acc, mut tokens) = (0, 0);
        for (i, c) in self.cycles.iter().enumerate() {
            acc += c.accepted;
            tokens += c.accepted + 1;
            let n = (i + 1) as f64;
            out.push(MetricsLine {
                cycle: Some(i),
                drafted: c.drafted,
                accepted: c.accepted,
                calls: i + 1,
                tokens,
                tau_accept: acc as f64 / n,
                tau_per_call: tokens as f64 / n,
            });
        }
        out.push(MetricsLine {
            cycle: None,
            drafted: self.total_drafted(),
            accepted: self.total_accepted(),
            calls: self.target_calls,
            tokens: self.tokens_generated,
            tau_accept: self.tau_accept(),
            tau_per_call: self.tau_per_call(),
        });
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for line in self.lines() {
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}
