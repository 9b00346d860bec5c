//! Run configuration tree and its stable fingerprint.
//!
//! Every field has a default, so an empty TOML file is a valid config.
//! Unknown keys are rejected at every level.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MceError, Result};

/// Which cross-encoding outputs feed the fused `f_cross` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MceOutput {
    /// Both branches, concatenated then reduced.
    Fusion,
    /// Only the query-branch features.
    QueryOnly,
    /// Only the support-branch features.
    SupportOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Channel widths of feature levels 2, 3 and 4.
    pub widths: [usize; 3],
    pub frozen: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [32, 64, 64],
            frozen: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Token dimension `d` of the query/key/value projections.
    pub token_dim: usize,
    pub heads: usize,
    /// Channels of the fused cross-encoding map.
    pub cross_channels: usize,
    /// Output channels of the ASPP block and the 3×3 conv after it.
    pub decoder_channels: usize,
    /// Channels of each ASPP branch before the 1×1 reduction.
    pub aspp_branch_channels: usize,
    /// Dilations of the three 3×3 ASPP branches.
    pub aspp_dilations: [usize; 3],
    /// Enables the masked cross-image encoding (the "cross map").
    pub use_cross_map: bool,
    pub mce_output: MceOutput,
    pub use_similarity: bool,
    /// Encode levels 2, 3 and 4; when false only level 3 is used.
    pub multi_level: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            token_dim: 64,
            heads: 1,
            cross_channels: 64,
            decoder_channels: 128,
            aspp_branch_channels: 32,
            aspp_dilations: [2, 4, 8],
            use_cross_map: true,
            mce_output: MceOutput::Fusion,
            use_similarity: true,
            multi_level: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone.widths.iter().any(|&w| w < 8) {
            return Err(MceError::Config("backbone widths must be >= 8".into()));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(MceError::Config(format!(
                "token_dim {} must be divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.token_dim == 0
            || self.cross_channels == 0
            || self.decoder_channels == 0
            || self.aspp_branch_channels == 0
        {
            return Err(MceError::Config("model dimensions must be positive".into()));
        }
        if self.aspp_dilations.contains(&0) {
            return Err(MceError::Config("ASPP dilations must be >= 1".into()));
        }
        Ok(())
    }

    /// Feature levels fed to the cross-image encoder.
    pub fn encoder_levels(&self) -> &'static [usize] {
        if self.multi_level {
            &[2, 3, 4]
        } else {
            &[3]
        }
    }

    pub fn width(&self, level: usize) -> usize {
        self.backbone.widths[level - 2]
    }

    /// Prototype length: level-2 and level-3 pooled vectors concatenated.
    pub fn prototype_len(&self) -> usize {
        self.width(2) + self.width(3)
    }

    /// Channels entering the decoder: `[f_Q | V_S | f_cross | A_sim]`.
    pub fn fused_channels(&self) -> usize {
        self.width(3)
            + self.prototype_len()
            + if self.use_cross_map {
                self.cross_channels
            } else {
                0
            }
            + usize::from(self.use_similarity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    pub image_size: usize,
    pub samples_per_class: usize,
    pub distractors_min: usize,
    pub distractors_max: usize,
    /// Object radius range as a fraction of the image size.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_jitter: f64,
    /// Per-channel jitter of an object's class color.
    pub color_jitter: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Stripe period in pixels for striped textures.
    pub stripe_period: f64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            image_size: 64,
            samples_per_class: 60,
            distractors_min: 0,
            distractors_max: 2,
            scale_min: 0.14,
            scale_max: 0.24,
            rotation_jitter: 180.0,
            color_jitter: 0.06,
            noise: 0.03,
            stripe_period: 6.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Episodes per step; their gradients are averaged.
    pub batch: usize,
    pub iterations: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch: 4,
            iterations: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub n_classes: usize,
    pub n_folds: usize,
    pub fold: usize,
    pub shots: usize,
    pub eval_episodes: usize,
    /// Seeds used by multi-seed runs (ablations).
    pub seeds: Vec<u64>,
    /// Worker threads for evaluation; 0 uses every core.
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_classes: 8,
            n_folds: 4,
            fold: 0,
            shots: 1,
            eval_episodes: 1000,
            seeds: vec![0, 1, 2],
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: SyntheticTaskConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub protocol: ProtocolConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text`, applies dotted `key=value` overrides, then validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut tree: toml::Table =
            toml::from_str(text).map_err(|e| MceError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            apply_override(&mut tree, key, raw)?;
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| MceError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.dataset;
        if d.image_size < 8 || d.image_size % 4 != 0 {
            return Err(MceError::Config(
                "dataset.image_size must be a multiple of 4 and >= 8".into(),
            ));
        }
        if d.distractors_min > d.distractors_max {
            return Err(MceError::Config("distractors_min > distractors_max".into()));
        }
        if !(d.scale_min > 0.0 && d.scale_min <= d.scale_max) {
            return Err(MceError::Config("need 0 < scale_min <= scale_max".into()));
        }
        let p = &self.protocol;
        if p.n_folds == 0 || p.n_classes % p.n_folds != 0 || p.n_classes / p.n_folds < 2 {
            return Err(MceError::Config(
                "classes must split evenly into folds of >= 2 classes".into(),
            ));
        }
        if p.fold >= p.n_folds {
            return Err(MceError::Config(format!("fold {} out of range", p.fold)));
        }
        if p.shots == 0 {
            return Err(MceError::Config("shots must be >= 1".into()));
        }
        if self.optim.batch == 0 {
            return Err(MceError::Config("optim.batch must be >= 1".into()));
        }
        Ok(())
    }

    /// Stable 64-bit hash of the canonicalized config tree.
    pub fn fingerprint(&self) -> u64 {
        // serde_json maps are key-sorted, which makes the text canonical.
        let canonical =
            serde_json::to_string(&serde_json::to_value(self).expect("config serializes"))
                .expect("json text");
        let digest = Sha256::digest(canonical.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }
}

fn apply_override(tree: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    // Values are TOML literals; bare words fall back to strings.
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| MceError::Config(format!("empty override key {key:?}")))?;
    let mut node = tree;
    for p in parts {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| MceError::Config(format!("override {key}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Derives an independent seed for one purpose (dataset, init, sampler, ...).
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}
