//! Draft models: the mixture-of-attentions drafter, an autoregressive
//! feature-predicting baseline, and an independent small language model.
//!
//! All three run behind [`DraftModel`]: the target side produces a
//! [`TargetFeed`] for each batch of newly verified tokens, and the drafting
//! side keeps a [`DraftState`] from which draft trees are grown slot by slot.

mod net;
mod state;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::numerics::{Parameters, Tensor};
use crate::target_model::{ModelWeights, StateSnapshot};

pub use net::{
    ca_input_independence_probe, input_independence_probe, lsa_rows, tli_mask, DrafterNet, EagleNet,
    IndependentNet, LsaNet, MoaNet, TeacherForced,
};
pub use state::{DraftState, SlotId, ROOT_SLOT};

pub const DRAFTER_MAGIC: [u8; 4] = *b"SDLD";
pub const DRAFTER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Moa,
    Eagle,
    Independent,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Moa => "moa",
            Variant::Eagle => "eagle",
            Variant::Independent => "independent",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moa" => Ok(Variant::Moa),
            "eagle" => Ok(Variant::Eagle),
            "independent" => Ok(Variant::Independent),
            other => Err(Error::Config(format!("unknown drafter variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrafterConfig {
    pub variant: Variant,
    /// Number of frozen target layers run on top of the drafter output.
    pub n: usize,
    /// When false, cross-attention reads raw final-layer taps instead of the
    /// layer-aggregated cache.
    pub use_lsa: bool,
    pub use_layer_embedding: bool,
    pub lsa_kv: usize,
    pub lsa_heads: usize,
    pub lsa_mlp: usize,
    pub sa_kv: usize,
    pub sa_heads: usize,
    pub sa_mlp: usize,
    pub ca_kv: usize,
    pub ca_heads: usize,
    pub ca_mlp: usize,
    pub eagle_kv: usize,
    pub eagle_heads: usize,
    pub eagle_mlp: usize,
    pub independent_layers: usize,
    pub independent_mlp: usize,
    /// Half-width of uniform noise added to teacher-forced taps (feature
    /// baseline only); 0 disables it.
    pub eagle_noise: f64,
    pub init_seed: u64,
}

impl Default for DrafterConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Moa,
            n: 0,
            use_lsa: true,
            use_layer_embedding: true,
            lsa_kv: 16,
            lsa_heads: 2,
            lsa_mlp: 96,
            sa_kv: 16,
            sa_heads: 4,
            sa_mlp: 32,
            ca_kv: 16,
            ca_heads: 4,
            ca_mlp: 112,
            eagle_kv: 16,
            eagle_heads: 4,
            eagle_mlp: 128,
            independent_layers: 2,
            independent_mlp: 128,
            eagle_noise: 0.0,
            init_seed: 0,
        }
    }
}

impl DrafterConfig {
    pub fn for_variant(variant: Variant, n: usize) -> Self {
        Self {
            variant,
            n,
            ..Self::default()
        }
    }

    pub fn validate(&self, target: &ModelWeights) -> Result<()> {
        let l = target.config.layers;
        if self.n >= l {
            return Err(Error::Config(format!(
                "target-layer offset {} must be below the layer count {l}",
                self.n
            )));
        }
        if self.variant != Variant::Moa && self.n != 0 {
            return Err(Error::Config(format!(
                "variant {} runs no target layers; n must be 0",
                self.variant
            )));
        }
        if self.variant == Variant::Independent && self.independent_layers == 0 {
            return Err(Error::Config("independent drafter needs a layer".into()));
        }
        Ok(())
    }
}

/// Activations the target sends for newly verified tokens, one block per
/// payload component, each `[rows, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetFeed {
    pub rows: usize,
    pub blocks: Vec<Tensor<f32>>,
}

impl TargetFeed {
    pub fn element_count(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Trained drafter bound to the target whose embeddings and head it shares.
#[derive(Debug)]
pub struct DraftModel {
    pub config: DrafterConfig,
    pub net: DrafterNet,
    pub target: Arc<ModelWeights>,
    lsa_calls: AtomicUsize,
}

impl Clone for DraftModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            net: self.net.clone(),
            target: Arc::clone(&self.target),
            lsa_calls: AtomicUsize::new(self.lsa_calls()),
        }
    }
}

impl Parameters for DraftModel {
    fn visit<'s>(&'s self, f: &mut dyn FnMut(&str, &'s Tensor<f32>)) {
        self.net.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f32>)) {
        self.net.visit_mut(f);
    }
}

impl DraftModel {
    /// Freshly initialized drafter for `target`.
    pub fn init(config: DrafterConfig, target: Arc<ModelWeights>) -> Result<Self> {
        config.validate(&target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let net = DrafterNet::init(&config, &target.config, &mut rng)?;
        let mut m = Self {
            config,
            net,
            target,
            lsa_calls: AtomicUsize::new(0),
        };
        m.set_trainable(true);
        Ok(m)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Widths of the feed blocks, in order.
    pub fn feed_widths(&self) -> Vec<usize> {
        let t = &self.target.config;
        let kv2 = 2 * t.kv_embed;
        match self.config.variant {
            Variant::Moa => {
                let first = if self.config.use_lsa { kv2 } else { t.embed };
                std::iter::once(first)
                    .chain(std::iter::repeat(kv2).take(self.config.n))
                    .collect()
            }
            Variant::Eagle => vec![t.embed],
            Variant::Independent => Vec::new(),
        }
    }

    /// Number of layer-aggregation passes run so far.
    pub fn lsa_calls(&self) -> usize {
        self.lsa_calls.load(Ordering::Relaxed)
    }

    /// Target-side payload for verified positions `start..end` of `snap`.
    pub fn build_feed(&self, snap: &StateSnapshot, start: usize, end: usize) -> Result<TargetFeed> {
        if start >= end || end > snap.len() {
            return Err(Error::Protocol(format!(
                "feed range {start}..{end} outside verified length {}",
                snap.len()
            )));
        }
        let rows = end - start;
        let t = &self.target.config;
        let mut blocks = Vec::new();
        match (&self.net, self.config.variant) {
            (DrafterNet::Moa(moa), _) => {
                match &moa.lsa {
                    Some(lsa) => {
                        self.lsa_calls.fetch_add(1, Ordering::Relaxed);
                        blocks.push(lsa.aggregate(&lsa_rows(&snap.cache, start, end))?);
                    }
                    None => blocks.push(snap.tap_rows(t.layers + 1, start, end)),
                }
                for l in t.layers - self.config.n..t.layers {
                    let mut data = Vec::with_capacity(rows * 2 * t.kv_embed);
                    for p in start..end {
                        data.extend_from_slice(snap.cache.key_row(l, p));
                        data.extend_from_slice(snap.cache.value_row(l, p));
                    }
                    blocks.push(Tensor::new(vec![rows, 2 * t.kv_embed], data)?);
                }
            }
            (_, Variant::Eagle) => blocks.push(snap.tap_rows(t.layers + 1, start, end)),
            _ => {}
        }
        Ok(TargetFeed { rows, blocks })
    }

    pub fn new_state(&self) -> DraftState {
        DraftState::new(self)
    }

    fn header(&self) -> DrafterHeader {
        DrafterHeader {
            config: self.config.clone(),
            target_config_hash: self.target.config.hash(),
            shared_hash: shared_tensor_hash(&self.target),
        }
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let header = serde_json::to_vec(&self.header())?;
        checkpoint::write(path, &DRAFTER_MAGIC, DRAFTER_VERSION, &header, self)
    }

    /// Loads a drafter and binds it to `target`, refusing a target whose
    /// configuration or shared tensors differ from the ones it was trained with.
    pub fn load(path: &Path, target: Arc<ModelWeights>) -> Result<Self> {
        let file = checkpoint::read(path, &DRAFTER_MAGIC)?;
        let header: DrafterHeader = serde_json::from_slice(&file.header)?;
        if header.target_config_hash != target.config.hash() {
            return Err(Error::Checkpoint(
                "drafter was trained against a different target configuration".into(),
            ));
        }
        if header.shared_hash != shared_tensor_hash(&target) {
            return Err(Error::Checkpoint(
                "target embedding/head tensors do not match the drafter's reference".into(),
            ));
        }
        let mut m = Self::init(header.config, target)?;
        file.fill(&mut m)?;
        m.set_trainable(false);
        Ok(m)
    }

    pub fn read_header(path: &Path) -> Result<DrafterHeader> {
        let file = checkpoint::read(path, &DRAFTER_MAGIC)?;
        Ok(serde_json::from_slice(&file.header)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrafterHeader {
    pub config: DrafterConfig,
    pub target_config_hash: String,
    /// Hash of the target's token embedding and head, stored by reference.
    pub shared_hash: String,
}

pub fn shared_tensor_hash(target: &ModelWeights) -> String {
    let shared = vec![(*target.token_embed).clone(), (*target.lm_head).clone()];
    crate::numerics::checksum(&shared)
}
