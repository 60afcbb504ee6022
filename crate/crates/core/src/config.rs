//! Model and experiment configuration.
//!
//! Configs are flat TOML documents (`key = value` per line). Unset keys take
//! their defaults; unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mop::PromptSource;

/// Maximum token sequence length of the text encoder, `[CLS]` included.
pub const MAX_TOKENS: usize = 77;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingGranularity {
    Pixel,
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub feature_dim: usize,
    pub encoder_layers: usize,
    pub num_heads: usize,
    pub text_layers: usize,
    pub decoder_blocks: usize,
    pub rec_decoder_layers: usize,
    pub conv_kernel: usize,
    pub num_prompts: usize,
    pub num_classes: usize,
    pub threshold: f64,
    pub mask_ratio_threshold: f64,
    pub loss_weight: f64,
    pub learning_rate: f64,
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Every n-th training sample also supervises one absent class.
    pub negative_every: usize,
    pub augment: bool,
    /// Comma-separated list drawn from `name`, `template`, `gpt`, `bard`.
    pub prompt_sources: String,
    /// Overrides the built-in prompt asset file.
    pub prompt_assets: Option<String>,
    pub msfa: bool,
    pub cls_token_pooling: bool,
    pub attention_prompting: bool,
    pub conv_prompting: bool,
    pub mop: bool,
    pub hiar: bool,
    pub ham: bool,
    pub gating_granularity: GatingGranularity,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            feature_dim: 64,
            encoder_layers: 12,
            num_heads: 4,
            text_layers: 2,
            decoder_blocks: 3,
            rec_decoder_layers: 2,
            conv_kernel: 1,
            num_prompts: 3,
            num_classes: 4,
            threshold: 0.35,
            mask_ratio_threshold: 0.25,
            loss_weight: 0.5,
            learning_rate: 1e-4,
            lr_drop_fraction: 0.7,
            lr_drop_factor: 0.1,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            negative_every: 4,
            augment: true,
            prompt_sources: "name,template,gpt".to_string(),
            prompt_assets: None,
            msfa: true,
            cls_token_pooling: true,
            attention_prompting: true,
            conv_prompting: true,
            mop: true,
            hiar: true,
            ham: true,
            gating_granularity: GatingGranularity::Pixel,
        }
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    /// Applies `key=value` overrides (values in TOML syntax; bare words are
    /// taken as strings) and re-validates.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round-trip of own serialisation");
        for ov in overrides {
            let ov = ov.as_ref();
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::ConfigParse(format!("override `{ov}` is not key=value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed key"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            table.insert(key.to_string(), value);
        }
        let text = toml::to_string(&table).expect("table serialises");
        text.parse()
    }

    /// Three encoder layers and batch size 2: the setup the overfit and
    /// ablation benchmarks use.
    pub fn desk() -> Self {
        ModelConfig { encoder_layers: 3, batch_size: 2, epochs: 200, seed: 7, ..Default::default() }
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_size() * self.grid_size()
    }

    /// Encoder layers (1-based) whose outputs feed the feature pyramid.
    pub fn tap_layers(&self) -> [usize; 3] {
        let l = self.encoder_layers;
        [l / 3, 2 * l / 3, l]
    }

    pub fn sources(&self) -> Result<Vec<PromptSource>> {
        self.prompt_sources
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|reason: String| Error::config("prompt_sources", reason)))
            .collect()
    }

    /// Prompts per class actually decoded: one when the mixture is disabled.
    pub fn active_prompts(&self) -> usize {
        if self.mop {
            self.num_prompts
        } else {
            1
        }
    }

    /// Learning rate for a 0-based epoch index.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let drop_at = (self.lr_drop_fraction * self.epochs as f64).floor() as usize;
        if epoch >= drop_at && self.lr_drop_fraction < 1.0 {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 {
            return Err(Error::config("patch_size", "must be positive"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(p) {
            return Err(Error::config(
                "image_size",
                format!("H mod p ≠ 0 ({} mod {} = {})", self.image_size, p, self.image_size % p),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim", "must be positive"));
        }
        if self.num_heads == 0 || !self.feature_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config("num_heads", "must divide feature_dim"));
        }
        if self.encoder_layers == 0 || !self.encoder_layers.is_multiple_of(3) {
            return Err(Error::config("encoder_layers", "L mod 3 ≠ 0 (taps sit at L/3, 2L/3, L)"));
        }
        if self.text_layers == 0 {
            return Err(Error::config("text_layers", "must be positive"));
        }
        if self.decoder_blocks == 0 {
            return Err(Error::config("decoder_blocks", "must be positive"));
        }
        if self.rec_decoder_layers == 0 {
            return Err(Error::config("rec_decoder_layers", "must be positive"));
        }
        if self.conv_kernel == 0 || self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("conv_kernel", "k must be odd and ≥ 1"));
        }
        if self.num_prompts == 0 {
            return Err(Error::config("num_prompts", "P must be ≥ 1"));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::config("num_classes", "C must lie in 1..=254"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold", "θ must lie in (0, 1)"));
        }
        if !(self.mask_ratio_threshold > 0.0 && self.mask_ratio_threshold < 1.0) {
            return Err(Error::config("mask_ratio_threshold", "r_t must lie in (0, 1)"));
        }
        let total = self.num_tokens() as f64;
        if (self.mask_ratio_threshold * total).round() >= total {
            return Err(Error::config("mask_ratio_threshold", "r_t would mask every patch"));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::config("loss_weight", "λ must be finite and ≥ 0"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) {
            return Err(Error::config("lr_drop_fraction", "must lie in [0, 1]"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return Err(Error::config("lr_drop_factor", "must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !self.attention_prompting && !self.conv_prompting {
            return Err(Error::config(
                "conv_prompting",
                "attention_prompting and conv_prompting cannot both be disabled",
            ));
        }
        let sources = self.sources()?;
        if sources.len() != self.num_prompts {
            return Err(Error::config(
                "prompt_sources",
                format!("{} sources listed but num_prompts = {}", sources.len(), self.num_prompts),
            ));
        }
        Ok(())
    }
}
