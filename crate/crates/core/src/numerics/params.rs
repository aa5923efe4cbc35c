//! Trainable-parameter traversal, Adam, and finite-difference gradient checks.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Gradients, Graph};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A collection of named tensors visited in a fixed order.
///
/// Only tensors with `requires_grad` set are trainable; the visit order is
/// the order used by optimizers and gradient checks.
pub trait Parameters {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Tensor<f32>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>));

    fn trainable(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| {
            if t.requires_grad {
                out.push((name.to_string(), t));
            }
        });
        out
    }

    /// Sets `requires_grad` on every tensor.
    fn set_trainable(&mut self, on: bool) {
        self.visit_mut(&mut |_, t| t.requires_grad = on);
    }
}

impl Parameters for Vec<Tensor<f32>> {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Tensor<f32>)) {
        for (i, t) in self.iter().enumerate() {
            f(&format!("t{i}"), t);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&format!("t{i}"), t);
        }
    }
}

/// Gradients of the trainable tensors of `params`, in visit order.
pub fn param_grads<S: Scalar, P: Parameters + ?Sized>(
    graph: &Graph<'_, S>,
    grads: &Gradients<S>,
    params: &P,
) -> Vec<Option<Tensor<S>>> {
    params
        .trainable()
        .into_iter()
        .map(|(_, t)| graph.param_var(t).and_then(|v| grads.get(v)).cloned())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 norm the gradient is clipped to; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to the trainable tensors of `params`. `grads` is in
    /// visit order; missing entries count as zero. Returns the pre-clip norm.
    pub fn step<P: Parameters + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &[Option<Tensor<f32>>],
        lr: f64,
    ) -> Result<f64> {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Training {
                step: self.step as usize,
                reason: "non-finite gradient".into(),
            });
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        let mut mismatch = false;
        params.visit_mut(&mut |_, w| {
            if !w.requires_grad {
                return;
            }
            let n = w.len();
            if m.len() <= idx {
                m.push(vec![0.0; n]);
                v.push(vec![0.0; n]);
            }
            let g = grads.get(idx).and_then(Option::as_ref);
            if g.is_some_and(|g| g.len() != n) || m[idx].len() != n {
                mismatch = true;
                idx += 1;
                return;
            }
            for (k, wv) in w.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k] as f64) * clip;
                m[idx][k] = c.beta1 * m[idx][k] + (1.0 - c.beta1) * gk;
                v[idx][k] = c.beta2 * v[idx][k] + (1.0 - c.beta2) * gk * gk;
                let upd = lr * (m[idx][k] / bc1) / ((v[idx][k] / bc2).sqrt() + c.eps);
                *wv = (*wv as f64 - upd) as f32;
            }
            idx += 1;
        });
        if mismatch || idx != grads.len() {
            return Err(Error::Dimension(format!(
                "optimizer got {} gradients for {idx} trainable tensors",
                grads.len()
            )));
        }
        Ok(norm)
    }
}

/// SHA-256 over names, shapes and little-endian values of every tensor.
pub fn checksum<P: Parameters + ?Sized>(params: &P) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    params.visit(&mut |name, t| {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Entries sampled per tensor (all entries when the tensor is smaller).
    pub max_entries: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            max_entries: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    /// `max |analytic − numeric| / max |numeric|` over the checked entries.
    pub rel_error: f64,
}

/// Compares analytic gradients against central finite differences.
///
/// `eval(params, with_grads)` returns the loss and, when asked, the analytic
/// gradients of the trainable tensors in visit order, all evaluated in 64-bit
/// arithmetic. Each perturbation is divided by the step actually realized in
/// 32-bit storage.
pub fn gradient_check<P, F, R>(
    params: &mut P,
    cfg: GradCheckConfig,
    rng: &mut R,
    eval: F,
) -> Result<Vec<GradCheckEntry>>
where
    P: Parameters + ?Sized,
    F: Fn(&P, bool) -> Result<(f64, Vec<Option<Tensor<f64>>>)>,
    R: Rng,
{
    let (_, analytic) = eval(params, true)?;
    let names: Vec<(String, usize)> = params
        .trainable()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    if analytic.len() != names.len() {
        return Err(Error::Dimension(format!(
            "{} analytic gradients for {} trainable tensors",
            analytic.len(),
            names.len()
        )));
    }
    let mut report = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.iter().enumerate() {
        let picks: Vec<usize> = if *len <= cfg.max_entries {
            (0..*len).collect()
        } else {
            let mut p = sample(rng, *len, cfg.max_entries).into_vec();
            p.sort_unstable();
            p
        };
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for &k in &picks {
            let orig = read_entry(params, ti, k);
            let up = (orig as f64 + cfg.eps) as f32;
            let down = (orig as f64 - cfg.eps) as f32;
            write_entry(params, ti, k, up);
            let lp = eval(params, false)?.0;
            write_entry(params, ti, k, down);
            let lm = eval(params, false)?.0;
            write_entry(params, ti, k, orig);
            let numeric = (lp - lm) / (up as f64 - down as f64);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g.data()[k]);
            max_diff = max_diff.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        let rel_error = if max_num > 1e-9 { max_diff / max_num } else { max_diff };
        report.push(GradCheckEntry {
            name: name.clone(),
            checked: picks.len(),
            rel_error,
        });
    }
    Ok(report)
}

fn read_entry<P: Parameters + ?Sized>(params: &P, ti: usize, k: usize) -> f32 {
    params.trainable()[ti].1.data()[k]
}

fn write_entry<P: Parameters + ?Sized>(params: &mut P, ti: usize, k: usize, value: f32) {
    let mut idx = 0;
    params.visit_mut(&mut |_, t| {
        if t.requires_grad {
            if idx == ti {
                t.data_mut()[k] = value;
            }
            idx += 1;
        }
    });
}
