use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use specdec::distill::DistillConfig;
use specdec::drafters::{DrafterConfig, Variant};
use specdec::speculation::{DraftMode, TreeShape};
use specdec::target_model::corpus::CorpusConfig;
use specdec::target_model::{ModelConfig, TrainTargetConfig};
use specdec::transport::NetworkProfile;

/// One drafter to train and evaluate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrafterSpec {
    pub variant: Variant,
    #[serde(default)]
    pub n: usize,
    #[serde(default = "yes")]
    pub use_lsa: bool,
}

fn yes() -> bool {
    true
}

impl DrafterSpec {
    pub fn name(&self) -> String {
        match self.variant {
            Variant::Moa if !self.use_lsa => format!("moa_n{}_nolsa", self.n),
            Variant::Moa => format!("moa_n{}", self.n),
            v => v.to_string(),
        }
    }

    pub fn drafter_config(&self, base: &DrafterConfig) -> DrafterConfig {
        DrafterConfig {
            variant: self.variant,
            n: self.n,
            use_lsa: self.use_lsa,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub language: CorpusConfig,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
    pub sequence_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            language: CorpusConfig::default(),
            train_sequences: 2000,
            heldout_sequences: 64,
            sequence_len: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DraftKind {
    Chain,
    Tree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub draft: DraftKind,
    pub chain_k: usize,
    pub tree: TreeShape,
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_new: usize,
    /// Zero means greedy.
    pub temperature: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            draft: DraftKind::Tree,
            chain_k: 5,
            tree: TreeShape::default(),
            prompts: 200,
            prompt_len: 12,
            max_new: 48,
            temperature: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn mode(&self) -> DraftMode {
        match self.draft {
            DraftKind::Chain => DraftMode::Chain { k: self.chain_k },
            DraftKind::Tree => DraftMode::Tree(self.tree),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub profile: String,
    /// Extra named profiles next to the built-in ones.
    pub profiles: BTreeMap<String, NetworkProfile>,
    pub prompts: usize,
    pub disconnect_after: Option<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            profile: "5g".into(),
            profiles: BTreeMap::new(),
            prompts: 20,
            disconnect_after: None,
        }
    }
}

impl NetworkConfig {
    pub fn resolve(&self, name: &str) -> anyhow::Result<NetworkProfile> {
        let p = match self.profiles.get(name) {
            Some(p) => p.clone(),
            None => NetworkProfile::builtin(name)?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub target_training: TrainTargetConfig,
    pub drafter_base: DrafterConfig,
    pub drafters: Vec<DrafterSpec>,
    pub distill: DistillConfig,
    pub decode: DecodeConfig,
    pub network: NetworkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = |variant, n, use_lsa| DrafterSpec { variant, n, use_lsa };
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            target_training: TrainTargetConfig::default(),
            drafter_base: DrafterConfig::default(),
            drafters: vec![
                spec(Variant::Moa, 0, true),
                spec(Variant::Moa, 1, true),
                spec(Variant::Moa, 3, true),
                spec(Variant::Moa, 0, false),
                spec(Variant::Eagle, 0, true),
                spec(Variant::Independent, 0, true),
            ],
            distill: DistillConfig::default(),
            decode: DecodeConfig::default(),
            network: NetworkConfig::default(),
        }
    }
}

/// Sets `path` (dot separated) inside `root` to `raw`, parsed as JSON when
/// possible and as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> anyhow::Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("malformed override key {path:?}");
    }
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| anyhow!("override {path:?}: {} is not an object", keys[..i].join(".")))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = obj.entry(*key).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty key path")
}

impl RunConfig {
    /// Defaults, then the file at `path`, then dotted overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> anyhow::Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let file: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            merge(&mut root, file);
        }
        for (k, v) in overrides {
            apply_override(&mut root, k, v)?;
        }
        let cfg: Self = serde_json::from_value(root).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let m = &self.model;
        if m.vocab_size < 3 || m.layers == 0 || m.embed == 0 || m.kv_embed == 0 || m.heads == 0 {
            bail!("model dimensions must be positive (vocab at least 3)");
        }
        if m.embed % m.heads != 0 || m.kv_embed % m.heads != 0 {
            bail!("embed and kv_embed must be multiples of heads");
        }
        if self.data.sequence_len < 4 || self.data.train_sequences == 0 {
            bail!("data needs sequences of at least 4 tokens");
        }
        if self.drafters.is_empty() {
            bail!("no drafters configured");
        }
        for d in &self.drafters {
            if d.n >= m.layers {
                bail!("drafter {} uses n={} with only {} target layers", d.name(), d.n, m.layers);
            }
            if d.variant != Variant::Moa && d.n != 0 {
                bail!("drafter {} must use n=0", d.name());
            }
        }
        let dec = &self.decode;
        dec.mode().shape().validate()?;
        if dec.prompt_len == 0 || dec.prompt_len >= self.data.sequence_len {
            bail!("decode.prompt_len must lie in 1..sequence_len");
        }
        if dec.prompt_len + dec.max_new > m.max_seq {
            bail!("prompt_len + max_new exceeds model.max_seq");
        }
        if !(dec.temperature >= 0.0 && dec.temperature.is_finite()) {
            bail!("decode.temperature must be finite and non-negative");
        }
        if dec.temperature > 0.0 && dec.draft == DraftKind::Tree {
            bail!("sampling runs on chain drafts only; set decode.draft to \"chain\"");
        }
        self.network.resolve(&self.network.profile)?;
        if let Some(w) = self.distill.weights {
            w.validate()?;
        }
        Ok(())
    }

    pub fn target_path(&self) -> PathBuf {
        self.out_dir.join("target.ckpt")
    }

    pub fn drafter_path(&self, spec: &DrafterSpec) -> PathBuf {
        self.out_dir.join("drafters").join(format!("{}.ckpt", spec.name()))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
