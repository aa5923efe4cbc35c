use std::rc::Rc;

use rand::{Rng, RngCore};

use super::{DraftModel, DrafterConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, ones, BlockDims, CrossLayer, DecoderLayer, Rope, NORM_EPS};
use crate::numerics::{make_masks, visible_prefix, AttentionMask, Graph, MaskKind, Scalar, Tensor, Var};
use crate::target_model::{KvCache, ModelConfig, StateSnapshot};

/// Bidirectional attention over the layer axis followed by a mean.
#[derive(Debug, Clone)]
pub struct LsaNet {
    pub layers: usize,
    pub layer_embed: Option<Tensor<f32>>,
    pub block: DecoderLayer,
}

#[derive(Debug, Clone)]
pub struct MoaNet {
    pub lsa: Option<LsaNet>,
    pub sa: DecoderLayer,
    pub ca: CrossLayer,
}

#[derive(Debug, Clone)]
pub struct EagleNet {
    /// `[2E, E]` fusion of `[previous feature ‖ token embedding]`.
    pub fuse: Tensor<f32>,
    pub layer: DecoderLayer,
}

#[derive(Debug, Clone)]
pub struct IndependentNet {
    pub layers: Vec<DecoderLayer>,
    pub norm: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub enum DrafterNet {
    Moa(MoaNet),
    Eagle(EagleNet),
    Independent(IndependentNet),
}

/// Stacks, per token, the `key ‖ value` row of every layer: `[T·L, 2·kv]`,
/// token-major.
pub fn lsa_rows(cache: &KvCache, start: usize, end: usize) -> Vec<Tensor<f32>> {
    (0..cache.layer_count())
        .map(|l| {
            let mut data = Vec::with_capacity((end - start) * 2 * cache.kv_width());
            for p in start..end {
                data.extend_from_slice(cache.key_row(l, p));
                data.extend_from_slice(cache.value_row(l, p));
            }
            Tensor::new(vec![end - start, 2 * cache.kv_width()], data).expect("kv rows")
        })
        .collect()
}

impl LsaNet {
    fn interleave(&self, per_layer: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        if per_layer.len() != self.layers {
            return Err(Error::Dimension(format!(
                "layer aggregation needs {} layers, got {}",
                self.layers,
                per_layer.len()
            )));
        }
        let t = per_layer[0].rows();
        let w = self.block.dims.width;
        if per_layer.iter().any(|x| x.rows() != t || x.cols() != w) {
            return Err(Error::Dimension(format!(
                "layer rows must all be [{t}, {w}]"
            )));
        }
        let mut data = Vec::with_capacity(t * self.layers * w);
        for i in 0..t {
            for x in per_layer {
                data.extend_from_slice(x.row(i));
            }
        }
        Tensor::new(vec![t * self.layers, w], data)
    }

    /// Graph version over `[T·L, 2·kv]` token-major rows.
    pub fn aggregate_graph<'a, S: Scalar>(&'a self, g: &mut Graph<'a, S>, rows: Var) -> Result<Var> {
        let n = g.value(rows).rows();
        let t = n / self.layers;
        let mut x = rows;
        if let Some(e) = &self.layer_embed {
            let ev = g.param(e);
            x = g.add_tiled(x, ev)?;
        }
        let mask = Rc::new(AttentionMask::block_diagonal(t, self.layers)?);
        let out = self.block.forward(g, x, None, None, &mask)?;
        g.group_mean(out.out, self.layers)
    }

    /// `[T, 2·kv]` aggregated vectors from per-layer `[T, 2·kv]` rows.
    pub fn aggregate(&self, per_layer: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let rows = self.interleave(per_layer)?;
        let mut g: Graph<f32> = Graph::no_grad();
        let x = g.input(rows);
        let out = self.aggregate_graph(&mut g, x)?;
        Ok(g.value(out).clone())
    }
}

impl DrafterNet {
    pub fn init<R: Rng>(cfg: &DrafterConfig, t: &ModelConfig, rng: &mut R) -> Result<Self> {
        let out_std = |w: usize| 0.5 / (w as f64).sqrt();
        Ok(match cfg.variant {
            Variant::Moa => {
                let kv2 = 2 * t.kv_embed;
                let lsa = if cfg.use_lsa {
                    let dims = BlockDims::new(kv2, cfg.lsa_kv, cfg.lsa_heads, cfg.lsa_mlp)?;
                    Some(LsaNet {
                        layers: t.layers,
                        layer_embed: cfg
                            .use_layer_embedding
                            .then(|| normal_tensor(rng, &[t.layers, kv2], 0.5)),
                        block: DecoderLayer::init(rng, dims, out_std(kv2)),
                    })
                } else {
                    None
                };
                let memory_width = if cfg.use_lsa { kv2 } else { t.embed };
                let sa = BlockDims::new(t.embed, cfg.sa_kv, cfg.sa_heads, cfg.sa_mlp)?;
                let ca = BlockDims::new(t.embed, cfg.ca_kv, cfg.ca_heads, cfg.ca_mlp)?;
                DrafterNet::Moa(MoaNet {
                    lsa,
                    sa: DecoderLayer::init(rng, sa, out_std(t.embed)),
                    ca: CrossLayer::init(rng, ca, memory_width, out_std(t.embed)),
                })
            }
            Variant::Eagle => {
                let dims = BlockDims::new(t.embed, cfg.eagle_kv, cfg.eagle_heads, cfg.eagle_mlp)?;
                DrafterNet::Eagle(EagleNet {
                    fuse: normal_tensor(rng, &[2 * t.embed, t.embed], 1.0 / (2.0 * t.embed as f64).sqrt()),
                    layer: DecoderLayer::init(rng, dims, out_std(t.embed)),
                })
            }
            Variant::Independent => {
                let dims = BlockDims::new(t.embed, t.kv_embed, t.heads, cfg.independent_mlp)?;
                DrafterNet::Independent(IndependentNet {
                    layers: (0..cfg.independent_layers)
                        .map(|_| DecoderLayer::init(rng, dims, out_std(t.embed)))
                        .collect(),
                    norm: ones(t.embed),
                })
            }
        })
    }

    pub fn visit<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Tensor<f32>)) {
        match self {
            DrafterNet::Moa(m) => {
                if let Some(lsa) = &m.lsa {
                    if let Some(e) = &lsa.layer_embed {
                        f("lsa.layer_embed", e);
                    }
                    lsa.block.visit("lsa", f);
                }
                m.sa.visit("sa", f);
                m.ca.visit("ca", f);
            }
            DrafterNet::Eagle(e) => {
                f("fuse", &e.fuse);
                e.layer.visit("layer", f);
            }
            DrafterNet::Independent(n) => {
                for (i, l) in n.layers.iter().enumerate() {
                    l.visit(&format!("layer{i}"), f);
                }
                f("norm", &n.norm);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        match self {
            DrafterNet::Moa(m) => {
                if let Some(lsa) = &mut m.lsa {
                    if let Some(e) = &mut lsa.layer_embed {
                        f("lsa.layer_embed", e);
                    }
                    lsa.block.visit_mut("lsa", f);
                }
                m.sa.visit_mut("sa", f);
                m.ca.visit_mut("ca", f);
            }
            DrafterNet::Eagle(e) => {
                f("fuse", &mut e.fuse);
                e.layer.visit_mut("layer", f);
            }
            DrafterNet::Independent(n) => {
                for (i, l) in n.layers.iter_mut().enumerate() {
                    l.visit_mut(&format!("layer{i}"), f);
                }
                f("norm", &mut n.norm);
            }
        }
    }
}

/// Attention mask of the frozen top layers during training. Keys are
/// `[true rows ; drafted rows]`: row `i` sees true rows before the last
/// verification point `b(i)` and its own drafted rows `b(i)..=i`.
pub fn tli_mask(len: usize, prompt_len: usize, breaks: &[usize]) -> Result<AttentionMask> {
    AttentionMask::from_fn(len, 2 * len, |i, j| {
        let b = if i < prompt_len {
            i
        } else {
            visible_prefix(i, prompt_len, breaks)
        };
        if j < len {
            j < b
        } else {
            let d = j - len;
            d >= b && d <= i
        }
    })
}

/// Graph outputs of a teacher-forced pass over a whole sequence.
#[derive(Debug, Clone, Copy)]
pub struct TeacherForced {
    /// `[T, E]` predicted activations at the drafter's target tap.
    pub predicted: Var,
    /// `[T, vocab]` next-token logits.
    pub logits: Var,
}

fn input_tensor<S: Scalar>(t: &Tensor<f32>) -> Tensor<S> {
    t.cast::<S>()
}

impl DraftModel {
    /// Teacher-forced forward over `snap.tokens`, whose first `prompt_len`
    /// tokens form the prompt and whose response is split at `breaks`.
    pub fn teacher_forced<'a, S: Scalar>(
        &'a self,
        g: &mut Graph<'a, S>,
        snap: &StateSnapshot,
        prompt_len: usize,
        breaks: &[usize],
        noise: Option<&mut dyn RngCore>,
    ) -> Result<TeacherForced> {
        let target = &*self.target;
        let tc = &target.config;
        let len = snap.len();
        if len == 0 || prompt_len == 0 || prompt_len > len {
            return Err(Error::Dimension(format!(
                "teacher-forced pass over {len} tokens with prompt {prompt_len}"
            )));
        }
        let tokens = &snap.tokens;
        let positions: Vec<usize> = (0..len).collect();
        let causal = Rc::new(AttentionMask::causal(len)?);
        match &self.net {
            DrafterNet::Moa(moa) => {
                let memory = match &moa.lsa {
                    Some(lsa) => {
                        let rows = lsa.interleave(&lsa_rows(&snap.cache, 0, len))?;
                        let rv = g.input(input_tensor(&rows));
                        lsa.aggregate_graph(g, rv)?
                    }
                    None => g.input(input_tensor(&snap.tap_rows(tc.layers + 1, 0, len))),
                };
                let x = target.embed(g, tokens)?;
                let rope = Rope {
                    positions: &positions,
                    base: tc.rope_base,
                };
                let sa = moa.sa.forward(g, x, Some(rope), None, &causal)?;
                let mkv = moa.ca.memory_kv(g, memory)?;
                let ca_mask = Rc::new(make_masks(MaskKind::CaKStep, len, prompt_len, breaks)?);
                let predicted = moa.ca.forward(g, sa.out, mkv, &ca_mask)?;
                let n = self.config.n;
                let logits = if n == 0 {
                    target.head(g, predicted)?
                } else {
                    let first = tc.layers - n;
                    let mut past = Vec::with_capacity(n);
                    for l in first..tc.layers {
                        let k = g.input_rows(len, tc.kv_embed, snap.cache.keys(l))?;
                        let v = g.input_rows(len, tc.kv_embed, snap.cache.values(l))?;
                        past.push(Some((k, v)));
                    }
                    let mask = Rc::new(tli_mask(len, prompt_len, breaks)?);
                    let (_, out, _) = target.run_layers(g, predicted, first, &positions, &past, &mask)?;
                    target.head(g, out)?
                };
                Ok(TeacherForced { predicted, logits })
            }
            DrafterNet::Eagle(e) => {
                let e_dim = tc.embed;
                let mut prev = vec![0.0f32; len * e_dim];
                for p in 1..len {
                    prev[p * e_dim..(p + 1) * e_dim].copy_from_slice(snap.tap(tc.layers + 1, p - 1));
                }
                if let Some(rng) = noise {
                    let a = self.config.eagle_noise;
                    if a > 0.0 {
                        for v in &mut prev[e_dim..] {
                            *v += rng.gen_range(-a..a) as f32;
                        }
                    }
                }
                let prev = g.input_rows(len, e_dim, &prev)?;
                let emb = target.embed(g, tokens)?;
                let predicted = self.eagle_step(g, e, prev, emb, &positions, None, &causal)?.0;
                let logits = target.head(g, predicted)?;
                Ok(TeacherForced { predicted, logits })
            }
            DrafterNet::Independent(net) => {
                let x = target.embed(g, tokens)?;
                let past = vec![None; net.layers.len()];
                let (predicted, _) = self.independent_stack(g, net, x, &positions, &past, &causal)?;
                let logits = target.head(g, predicted)?;
                Ok(TeacherForced { predicted, logits })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn eagle_step<'a, S: Scalar>(
        &'a self,
        g: &mut Graph<'a, S>,
        e: &'a EagleNet,
        prev: Var,
        emb: Var,
        positions: &[usize],
        past: Option<(Var, Var)>,
        mask: &Rc<AttentionMask>,
    ) -> Result<(Var, Var, Var)> {
        let fused_in = g.concat_cols(&[prev, emb])?;
        let w = g.param(&e.fuse);
        let x = g.matmul(fused_in, w)?;
        let rope = Rope {
            positions,
            base: self.target.config.rope_base,
        };
        let b = e.layer.forward(g, x, Some(rope), past, mask)?;
        Ok((b.out, b.keys, b.values))
    }

    pub(crate) fn independent_stack<'a, S: Scalar>(
        &'a self,
        g: &mut Graph<'a, S>,
        net: &'a IndependentNet,
        x: Var,
        positions: &[usize],
        past: &[Option<(Var, Var)>],
        mask: &Rc<AttentionMask>,
    ) -> Result<(Var, Vec<(Var, Var)>)> {
        let rope = Rope {
            positions,
            base: self.target.config.rope_base,
        };
        let mut h = x;
        let mut kv = Vec::with_capacity(net.layers.len());
        for (layer, p) in net.layers.iter().zip(past) {
            let b = layer.forward(g, h, Some(rope), *p, mask)?;
            h = b.out;
            kv.push((b.keys, b.values));
        }
        let gain = g.param(&net.norm);
        Ok((g.rms_norm(h, gain, NORM_EPS)?, kv))
    }
}

/// True iff every output row of `f` on all rows equals `f` on that row alone
/// (within 1e-6).
pub fn input_independence_probe(
    f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
    x: &Tensor<f32>,
) -> Result<bool> {
    let all = f(x)?;
    for i in 0..x.rows() {
        let alone = f(&Tensor::from_rows(&[x.row(i).to_vec()])?)?;
        let d = alone
            .row(0)
            .iter()
            .zip(all.row(i))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        if d > 1e-6 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Row-independence of the cross-attention block over a fixed memory.
pub fn ca_input_independence_probe(ca: &CrossLayer, memory: &Tensor<f32>, queries: &Tensor<f32>) -> Result<bool> {
    input_independence_probe(
        |q| {
            let mut g: Graph<f32> = Graph::no_grad();
            let qv = g.input(q.clone());
            let mv = g.input(memory.clone());
            let kv = ca.memory_kv(&mut g, mv)?;
            let mask = Rc::new(AttentionMask::full(q.rows(), memory.rows())?);
            let out = ca.forward(&mut g, qv, kv, &mask)?;
            Ok(g.value(out).clone())
        },
        queries,
    )
}
