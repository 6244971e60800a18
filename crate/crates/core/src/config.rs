//! Sectioned TOML configuration.
//!
//! Every key can be overridden from the environment as
//! `CCAF_<SECTION>__<KEY>`, e.g. `CCAF_STAGE2__LR=1e-4`. Override values are
//! parsed as TOML literals and fall back to plain strings.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::labels;
use crate::error::{Error, Result};
use crate::losses::SimilarityConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;

pub const ENV_PREFIX: &str = "CCAF_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Floating-point width used for training and feature extraction.
    pub precision: Precision,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Relative paths resolve against the config file's directory.
    pub manifest: PathBuf,
    pub image_height: usize,
    pub image_width: usize,
    pub clothes_labels: Vec<u8>,
    pub mask_ext: String,
    pub cache_masks: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.tsv"),
            image_height: 256,
            image_width: 128,
            clothes_labels: labels::DEFAULT_CLOTHES.to_vec(),
            mask_ext: "mask.png".into(),
            cache_masks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub feature_dim: usize,
    pub conv_widths: [usize; 2],
    pub d_tok: usize,
    pub prompt_tokens: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            feature_dim: 64,
            conv_widths: [8, 16],
            d_tok: 64,
            prompt_tokens: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub p: usize,
    pub k: usize,
    /// Optional cross-check: must equal `p * k` when set.
    pub size: Option<usize>,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self {
            p: 16,
            k: 4,
            size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Section {
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for Stage1Section {
    fn default() -> Self {
        Self {
            epochs: 120,
            lr: 3.5e-4,
            lr_floor: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Section {
    pub epochs: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Learning rate of the clothes projection; defaults to `lr`.
    pub proj_lr: Option<f64>,
    pub checkpoint_every: usize,
    /// Stage-1 checkpoint to start from.
    pub init_checkpoint: Option<PathBuf>,
    pub use_i2t: bool,
    pub use_i2i: bool,
    pub use_cfm: bool,
}

impl Default for Stage2Section {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 5e-6,
            lr_floor: 0.0,
            proj_lr: None,
            checkpoint_every: 0,
            init_checkpoint: None,
            use_i2t: true,
            use_i2i: true,
            use_cfm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub margin: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub temperature: f64,
    /// When non-zero, the full-vocabulary prompt losses use this many
    /// sampled negative classes plus the classes in the batch.
    pub sampled_negatives: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            margin: 0.3,
            lambda1: 0.1,
            lambda2: 1.0,
            temperature: 0.07,
            sampled_negatives: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub hflip: bool,
    /// Pad-then-crop border in pixels (0 disables).
    pub pad: usize,
    pub random_erasing: bool,
    pub erasing_prob: f64,
    /// Apply random erasing to the shielding and clothes streams too.
    pub erase_masked_streams: bool,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self {
            hflip: true,
            pad: 10,
            random_erasing: true,
            erasing_prob: 0.5,
            erase_masked_streams: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub protocol: String,
    /// Same-clothes protocol: keep every same-outfit cross-camera gallery
    /// entry as a positive (otherwise only the first one counts).
    pub multi_shot: bool,
    pub batch_size: usize,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            protocol: "cloth-changing".into(),
            multi_shot: true,
            batch_size: 64,
            histogram_bins: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub identities: usize,
    pub outfits: usize,
    pub images_per_outfit: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            identities: 8,
            outfits: 2,
            images_per_outfit: 10,
            height: 64,
            width: 32,
            noise: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub batch: BatchSection,
    pub stage1: Stage1Section,
    pub stage2: Stage2Section,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub augment: AugmentSection,
    pub eval: EvalSection,
    pub toy: ToySection,
    /// Directory the config was read from; relative paths resolve here.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Parse an override value as a TOML literal, or keep it as a string.
fn env_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl Config {
    /// Parse TOML text and apply overrides from `env`.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let Some((section, field)) = rest.split_once("__") else {
                continue;
            };
            let (section, field) = (section.to_ascii_lowercase(), field.to_ascii_lowercase());
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(field, env_value(&raw));
                }
                _ => return Err(Error::Config(format!("`{section}` is not a section"))),
            }
        }
        let cfg: Config = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Read a config file, applying overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_with_env(&text, std::env::vars())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.data.manifest)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.data.image_height, self.data.image_width)
    }

    pub fn clothes_labels(&self) -> BTreeSet<u8> {
        self.data.clothes_labels.iter().copied().collect()
    }

    pub fn similarity(&self) -> SimilarityConfig {
        SimilarityConfig {
            temperature: self.loss.temperature,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            weight_decay: self.optim.weight_decay,
        }
    }

    pub fn model_config(&self, num_identities: usize, num_clothes: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: self.model.feature_dim,
            conv_widths: (self.model.conv_widths[0], self.model.conv_widths[1]),
            d_tok: self.model.d_tok,
            prompt_tokens: self.model.prompt_tokens,
            num_identities,
            num_clothes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                problems.push(msg.to_string());
            }
        };
        need(self.batch.p >= 2, "batch.p must be at least 2");
        need(self.batch.k >= 1, "batch.k must be positive");
        if let Some(size) = self.batch.size {
            need(size == self.batch.p * self.batch.k, "batch.size must equal batch.p * batch.k");
        }
        need(self.stage1.lr > 0.0 && self.stage2.lr > 0.0, "learning rates must be positive");
        need(self.stage2.proj_lr.is_none_or(|l| l > 0.0), "stage2.proj_lr must be positive");
        need(
            self.stage1.lr_floor >= 0.0 && self.stage1.lr_floor <= self.stage1.lr,
            "stage1.lr_floor must lie in [0, lr]",
        );
        need(
            self.stage2.lr_floor >= 0.0 && self.stage2.lr_floor <= self.stage2.lr,
            "stage2.lr_floor must lie in [0, lr]",
        );
        need(self.loss.margin >= 0.0, "loss.margin must be non-negative");
        need(self.loss.temperature > 0.0, "loss.temperature must be positive");
        need(self.loss.lambda1 >= 0.0 && self.loss.lambda2 >= 0.0, "loss weights must be non-negative");
        need(self.model.feature_dim >= 4, "model.feature_dim must be at least 4");
        need(
            self.data.image_height > 0
                && self.data.image_width > 0
                && self.data.image_height % 32 == 0
                && self.data.image_width % 16 == 0,
            "image size must be a positive multiple of 32x16",
        );
        need(
            self.data.clothes_labels.iter().all(|&l| l < labels::COUNT),
            "data.clothes_labels must lie in the 20-class vocabulary",
        );
        need((0.0..=1.0).contains(&self.augment.erasing_prob), "augment.erasing_prob must lie in [0, 1]");
        need(self.eval.batch_size > 0, "eval.batch_size must be positive");
        need(self.toy.height % 32 == 0 && self.toy.width % 16 == 0 && self.toy.height >= 64 && self.toy.width >= 32,
            "toy image size must be a multiple of 32x16 and at least 64x32");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
