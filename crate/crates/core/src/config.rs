//! Model, training and decoding hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtLossMode {
    /// Mean sigmoid binary cross-entropy per sentence.
    #[default]
    Bce,
    /// Softmax over sentences, negative log-probability of oracle-positive ones.
    SoftmaxNll,
}

/// Ablations that remove one path or loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Decoder uses one cross-attention over the concatenated encoder states.
    NoVisualGuide,
    /// Extractive loss dropped from the objective.
    NoExt,
    NoBoth,
}

impl Ablation {
    pub fn visual_guide(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoExt)
    }

    pub fn ext_loss(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoVisualGuide)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-visual-guide" => Ok(Ablation::NoVisualGuide),
            "no-ext" => Ok(Ablation::NoExt),
            "no-both" => Ok(Ablation::NoBoth),
            other => Err(Error::Input(format!("unknown ablation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub patch_size: usize,
    pub image_resolution: usize,
    pub channels: usize,
    pub max_images: usize,
    pub max_text_tokens: usize,
    pub kd_temperature: f64,
    /// 1-based encoder layer whose image-CLS states feed the selection head.
    pub kd_tap_layer: usize,
    pub ext_loss_mode: ExtLossMode,
    pub max_decode_len: usize,
    pub dropout: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            vocab_size: 206,
            patch_size: 8,
            image_resolution: 32,
            channels: 3,
            max_images: 10,
            max_text_tokens: 512,
            kd_temperature: 10.0,
            kd_tap_layer: 2,
            ext_loss_mode: ExtLossMode::Bce,
            max_decode_len: 32,
            dropout: 0.0,
            ablation: Ablation::None,
            seed: 7,
        }
    }
}

impl ModelConfig {
    /// The image geometry used for the full-size model: 224×224 inputs,
    /// 32×32 patches, at most 10 images, 512 text tokens.
    pub fn full_size_geometry() -> Self {
        Self {
            image_resolution: 224,
            patch_size: 32,
            max_images: 10,
            max_text_tokens: 512,
            ..Self::default()
        }
    }

    pub fn patches_per_image(&self) -> usize {
        let side = self.image_resolution / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Maximum visual stream length: every image contributes its CLS slot plus patches.
    pub fn max_visual_len(&self) -> usize {
        self.max_images * (1 + self.patches_per_image())
    }

    pub fn max_positions(&self) -> usize {
        self.max_text_tokens + self.max_visual_len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return fail("n_enc_layers and n_dec_layers must be at least 1".into());
        }
        if self.kd_tap_layer < 1 || self.kd_tap_layer > self.n_enc_layers {
            return fail(format!(
                "kd_tap_layer {} outside 1..={}",
                self.kd_tap_layer, self.n_enc_layers
            ));
        }
        if !(self.kd_temperature > 0.0 && self.kd_temperature.is_finite()) {
            return fail(format!("kd_temperature {} must be positive", self.kd_temperature));
        }
        if self.patch_size == 0 || self.image_resolution % self.patch_size != 0 {
            return fail(format!(
                "image_resolution {} not divisible by patch_size {}",
                self.image_resolution, self.patch_size
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.vocab_size <= crate::data::vocab::NUM_RESERVED {
            return fail(format!("vocab_size {} leaves no room for words", self.vocab_size));
        }
        if self.max_text_tokens < 3 {
            return fail("max_text_tokens must fit at least one sentence".into());
        }
        if self.max_decode_len == 0 {
            return fail("max_decode_len must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub keep_best: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 2000,
            warmup_steps: 50,
            peak_lr: 1e-4,
            batch_size: 8,
            eval_every: 200,
            keep_best: 3,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be positive".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.keep_best == 0 {
            return Err(Error::Config("keep_best must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Sentences kept by the extractive summary.
    pub ext_top_k: usize,
    pub image_top_k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            length_penalty: 1.8,
            ext_top_k: 3,
            image_top_k: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub min_count: usize,
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_size: 200,
        }
    }
}

/// Everything a run needs, as read from `--config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub vocab: VocabConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }
}
