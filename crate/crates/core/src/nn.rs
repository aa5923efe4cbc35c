//! Transformer building blocks shared by the target model and the drafters.

use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{AttentionMask, Graph, Scalar, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Widths of one attention + MLP block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockDims {
    pub width: usize,
    pub kv_width: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
}

impl BlockDims {
    /// Query heads split `width`; key/value heads reuse the query head size.
    pub fn new(width: usize, kv_width: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        if heads == 0 || width == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide width {width}"
            )));
        }
        let head_dim = width / heads;
        if kv_width == 0 || kv_width % head_dim != 0 || heads % (kv_width / head_dim) != 0 {
            return Err(Error::Config(format!(
                "key/value width {kv_width} is not a divisor multiple of head size {head_dim} for {heads} heads"
            )));
        }
        if mlp_hidden == 0 {
            return Err(Error::Config("mlp hidden width must be positive".into()));
        }
        Ok(Self {
            width,
            kv_width,
            heads,
            kv_heads: kv_width / head_dim,
            head_dim,
            mlp_hidden,
        })
    }
}

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

pub fn ones(n: usize) -> Tensor<f32> {
    Tensor::new(vec![n], vec![1.0; n]).expect("shape matches")
}

/// Rotary encoding parameters for one forward call.
#[derive(Debug, Clone, Copy)]
pub struct Rope<'p> {
    pub positions: &'p [usize],
    pub base: f64,
}

/// SwiGLU feed-forward with its own pre-norm.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub norm: Tensor<f32>,
    pub w_gate: Tensor<f32>,
    pub w_up: Tensor<f32>,
    pub w_down: Tensor<f32>,
}

impl Mlp {
    pub fn init<R: Rng>(rng: &mut R, width: usize, hidden: usize, out_std: f64) -> Self {
        let s = 1.0 / (width as f64).sqrt();
        Self {
            norm: ones(width),
            w_gate: normal_tensor(rng, &[width, hidden], s),
            w_up: normal_tensor(rng, &[width, hidden], s),
            w_down: normal_tensor(rng, &[hidden, width], out_std),
        }
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor<f32>)) {
        f(&format!("{prefix}.mlp_norm"), &self.norm);
        f(&format!("{prefix}.w_gate"), &self.w_gate);
        f(&format!("{prefix}.w_up"), &self.w_up);
        f(&format!("{prefix}.w_down"), &self.w_down);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f(&format!("{prefix}.mlp_norm"), &mut self.norm);
        f(&format!("{prefix}.w_gate"), &mut self.w_gate);
        f(&format!("{prefix}.w_up"), &mut self.w_up);
        f(&format!("{prefix}.w_down"), &mut self.w_down);
    }

    /// `x + down(silu(gate(n)) ⊙ up(n))` with `n = norm(x)`.
    pub fn forward<'a, S: Scalar>(&'a self, g: &mut Graph<'a, S>, x: Var) -> Result<Var> {
        let gain = g.param(&self.norm);
        let h = g.rms_norm(x, gain, NORM_EPS)?;
        let wg = g.param(&self.w_gate);
        let wu = g.param(&self.w_up);
        let wd = g.param(&self.w_down);
        let gate = g.matmul(h, wg)?;
        let gate = g.silu(gate);
        let up = g.matmul(h, wu)?;
        let act = g.mul(gate, up)?;
        let down = g.matmul(act, wd)?;
        g.add(x, down)
    }
}

/// Pre-norm self-attention block followed by an MLP.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub dims: BlockDims,
    pub attn_norm: Tensor<f32>,
    pub wq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub wo: Tensor<f32>,
    pub mlp: Mlp,
}

/// Output of a block plus the key/value rows it produced for its new inputs.
#[derive(Debug, Clone, Copy)]
pub struct BlockOut {
    pub out: Var,
    pub keys: Var,
    pub values: Var,
}

impl DecoderLayer {
    /// `out_std` scales the two projections that write into the residual stream.
    pub fn init<R: Rng>(rng: &mut R, dims: BlockDims, out_std: f64) -> Self {
        let s = 1.0 / (dims.width as f64).sqrt();
        Self {
            dims,
            attn_norm: ones(dims.width),
            wq: normal_tensor(rng, &[dims.width, dims.width], s),
            wk: normal_tensor(rng, &[dims.width, dims.kv_width], s),
            wv: normal_tensor(rng, &[dims.width, dims.kv_width], s),
            wo: normal_tensor(rng, &[dims.width, dims.width], out_std),
            mlp: Mlp::init(rng, dims.width, dims.mlp_hidden, out_std),
        }
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor<f32>)) {
        f(&format!("{prefix}.attn_norm"), &self.attn_norm);
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
        self.mlp.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f(&format!("{prefix}.attn_norm"), &mut self.attn_norm);
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        self.mlp.visit_mut(prefix, f);
    }

    /// Runs the block on rows `x`. Keys are `[past ; new]`, so `mask` has
    /// `past_rows + rows(x)` columns. Returned keys are post-rotary.
    pub fn forward<'a, S: Scalar>(
        &'a self,
        g: &mut Graph<'a, S>,
        x: Var,
        rope: Option<Rope<'_>>,
        past: Option<(Var, Var)>,
        mask: &Rc<AttentionMask>,
    ) -> Result<BlockOut> {
        let d = self.dims;
        let gain = g.param(&self.attn_norm);
        let h = g.rms_norm(x, gain, NORM_EPS)?;
        let (wq, wk, wv, wo) = (
            g.param(&self.wq),
            g.param(&self.wk),
            g.param(&self.wv),
            g.param(&self.wo),
        );
        let mut q = g.matmul(h, wq)?;
        let mut k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        if let Some(r) = rope {
            q = g.rope(q, r.positions, d.head_dim, r.base)?;
            k = g.rope(k, r.positions, d.head_dim, r.base)?;
        }
        let (kk, vv) = match past {
            Some((pk, pv)) => (g.concat_rows(&[pk, k])?, g.concat_rows(&[pv, v])?),
            None => (k, v),
        };
        let a = g.attention(q, kk, vv, mask, d.heads, d.kv_heads)?;
        let proj = g.matmul(a, wo)?;
        let x1 = g.add(x, proj)?;
        let out = self.mlp.forward(g, x1)?;
        Ok(BlockOut {
            out,
            keys: k,
            values: v,
        })
    }
}

/// Cross-attention block: queries from the token stream, keys and values
/// projected from an external memory of per-position vectors.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    pub dims: BlockDims,
    pub memory_width: usize,
    pub q_norm: Tensor<f32>,
    pub memory_norm: Tensor<f32>,
    pub wq: Tensor<f32>,
    pub wk: Tensor<f32>,
    pub wv: Tensor<f32>,
    pub wo: Tensor<f32>,
    pub mlp: Mlp,
}

impl CrossLayer {
    pub fn init<R: Rng>(rng: &mut R, dims: BlockDims, memory_width: usize, out_std: f64) -> Self {
        let s = 1.0 / (dims.width as f64).sqrt();
        let sm = 1.0 / (memory_width as f64).sqrt();
        Self {
            dims,
            memory_width,
            q_norm: ones(dims.width),
            memory_norm: ones(memory_width),
            wq: normal_tensor(rng, &[dims.width, dims.width], s),
            wk: normal_tensor(rng, &[memory_width, dims.kv_width], sm),
            wv: normal_tensor(rng, &[memory_width, dims.kv_width], sm),
            wo: normal_tensor(rng, &[dims.width, dims.width], out_std),
            mlp: Mlp::init(rng, dims.width, dims.mlp_hidden, out_std),
        }
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut dyn FnMut(&str, &'s Tensor<f32>)) {
        f(&format!("{prefix}.q_norm"), &self.q_norm);
        f(&format!("{prefix}.memory_norm"), &self.memory_norm);
        f(&format!("{prefix}.wq"), &self.wq);
        f(&format!("{prefix}.wk"), &self.wk);
        f(&format!("{prefix}.wv"), &self.wv);
        f(&format!("{prefix}.wo"), &self.wo);
        self.mlp.visit(prefix, f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        f(&format!("{prefix}.q_norm"), &mut self.q_norm);
        f(&format!("{prefix}.memory_norm"), &mut self.memory_norm);
        f(&format!("{prefix}.wq"), &mut self.wq);
        f(&format!("{prefix}.wk"), &mut self.wk);
        f(&format!("{prefix}.wv"), &mut self.wv);
        f(&format!("{prefix}.wo"), &mut self.wo);
        self.mlp.visit_mut(prefix, f);
    }

    /// Key and value rows for memory vectors (computed once per memory row).
    pub fn memory_kv<'a, S: Scalar>(&'a self, g: &mut Graph<'a, S>, memory: Var) -> Result<(Var, Var)> {
        let gain = g.param(&self.memory_norm);
        let m = g.rms_norm(memory, gain, NORM_EPS)?;
        let (wk, wv) = (g.param(&self.wk), g.param(&self.wv));
        Ok((g.matmul(m, wk)?, g.matmul(m, wv)?))
    }

    pub fn forward<'a, S: Scalar>(
        &'a self,
        g: &mut Graph<'a, S>,
        x: Var,
        memory_kv: (Var, Var),
        mask: &Rc<AttentionMask>,
    ) -> Result<Var> {
        let d = self.dims;
        let gain = g.param(&self.q_norm);
        let h = g.rms_norm(x, gain, NORM_EPS)?;
        let wq = g.param(&self.wq);
        let wo = g.param(&self.wo);
        let q = g.matmul(h, wq)?;
        let a = g.attention(q, memory_kv.0, memory_kv.1, mask, d.heads, d.kv_heads)?;
        let proj = g.matmul(a, wo)?;
        let x1 = g.add(x, proj)?;
        self.mlp.forward(g, x1)
    }
}
