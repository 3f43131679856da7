//! Run configuration: one JSON document, every key defaulted, unknown keys
//! rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Fusion;
use crate::error::{GmaError, Result};

/// Number of attribute channels the generator writes (color, shape, size).
pub const ATTRIBUTE_CHANNELS: usize = 16;

/// Model variants the harness can train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    San,
    McbAtt,
    Gia,
    Gta,
    GmaCat,
    GmaMcb,
    GmaMcbAtt,
    /// GMA with the fused re-attention bypassed (`A = A_i`); diagnostic only.
    GmaPass,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::San,
        Variant::McbAtt,
        Variant::Gia,
        Variant::Gta,
        Variant::GmaCat,
        Variant::GmaMcb,
        Variant::GmaMcbAtt,
        Variant::GmaPass,
    ];

    /// The variants of the fusion ablation table.
    pub const TABLE: [Variant; 7] = [
        Variant::San,
        Variant::McbAtt,
        Variant::Gia,
        Variant::Gta,
        Variant::GmaCat,
        Variant::GmaMcb,
        Variant::GmaMcbAtt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::San => "san",
            Variant::McbAtt => "mcb_att",
            Variant::Gia => "gia",
            Variant::Gta => "gta",
            Variant::GmaCat => "gma_cat",
            Variant::GmaMcb => "gma_mcb",
            Variant::GmaMcbAtt => "gma_mcb_att",
            Variant::GmaPass => "gma_pass",
        }
    }

    pub fn fusion(self) -> Option<Fusion> {
        match self {
            Variant::GmaCat => Some(Fusion::Concat),
            Variant::GmaMcb => Some(Fusion::Mcb),
            Variant::GmaMcbAtt => Some(Fusion::McbAtt),
            Variant::GmaPass => Some(Fusion::Passthrough),
            _ => None,
        }
    }

    pub fn uses_image_granules(self) -> bool {
        matches!(self, Variant::Gia) || self.fusion().is_some()
    }

    pub fn uses_text_granules(self) -> bool {
        matches!(self, Variant::Gta) || self.fusion().is_some()
    }

    /// Whether a saliency probe must be trained first.
    pub fn needs_probe(self) -> bool {
        self.uses_image_granules() || self.uses_text_granules()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GmaError;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GmaError::Config(format!("unknown variant {s:?}")))
    }
}

/// Where granule saliency comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencySource {
    /// Randomized-mask saliency of the trained probe.
    Rise,
    /// Every cell equally salient (granules fall back to row-major order).
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Grid side `N`.
    pub grid: usize,
    /// Cell channels `C`; the first 16 carry attributes.
    pub channels: usize,
    /// Width `d` of token embeddings, encoders and projected cells.
    pub embed_dim: usize,
    /// Hidden width of attention scorers.
    pub hidden: usize,
    pub sketch_dim: usize,
    /// Granule count `K`.
    pub granules: usize,
    pub variant: Variant,
    pub san_iterations: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Dialogs per parameter update.
    pub batch_size: usize,
    pub mask_keep_prob: f64,
    pub mask_low_res: usize,
    pub mask_count: usize,
    pub saliency: SaliencySource,
    pub option_count: usize,
    pub rounds: usize,
    pub train_dialogs: usize,
    pub val_dialogs: usize,
    pub test_dialogs: usize,
    pub objects: usize,
    pub feature_noise: f64,
    pub coreference_prob: f64,
    /// Signed square root and L2 after MCB fusion.
    pub normalize_fused: bool,
    pub shared_history_attention: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            grid: 7,
            channels: 16,
            embed_dim: 32,
            hidden: 32,
            sketch_dim: 512,
            granules: 16,
            variant: Variant::GmaMcbAtt,
            san_iterations: 2,
            learning_rate: 0.03,
            epochs: 16,
            batch_size: 2,
            mask_keep_prob: 0.5,
            mask_low_res: 4,
            mask_count: 500,
            saliency: SaliencySource::Rise,
            option_count: 20,
            rounds: 10,
            train_dialogs: 500,
            val_dialogs: 100,
            test_dialogs: 100,
            objects: 5,
            feature_noise: 0.1,
            coreference_prob: 0.25,
            normalize_fused: true,
            shared_history_attention: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| GmaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        RunConfig {
            variant,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid", self.grid),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("sketch_dim", self.sketch_dim),
            ("granules", self.granules),
            ("san_iterations", self.san_iterations),
            ("batch_size", self.batch_size),
            ("mask_low_res", self.mask_low_res),
            ("mask_count", self.mask_count),
            ("option_count", self.option_count),
            ("rounds", self.rounds),
            ("train_dialogs", self.train_dialogs),
            ("objects", self.objects),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(GmaError::Config(format!("{name} must be positive")));
            }
        }
        let cells = self.grid * self.grid;
        if self.granules > cells {
            return Err(GmaError::Config(format!("granules {} exceed the {cells} grid cells", self.granules)));
        }
        if self.channels < ATTRIBUTE_CHANNELS {
            return Err(GmaError::Config(format!("channels must be at least {ATTRIBUTE_CHANNELS}")));
        }
        if self.objects > super::dataset::COLORS.len().min(cells) {
            return Err(GmaError::Config(format!("at most {} objects fit", super::dataset::COLORS.len().min(cells))));
        }
        if self.option_count > super::dataset::ANSWER_SPACE {
            return Err(GmaError::Config(format!(
                "option_count {} exceeds the {} distinct answers",
                self.option_count,
                super::dataset::ANSWER_SPACE
            )));
        }
        if self.option_count < self.objects {
            return Err(GmaError::Config("option_count must cover every object in an image".into()));
        }
        if self.mask_low_res > self.grid {
            return Err(GmaError::Config("mask_low_res exceeds grid".into()));
        }
        if !(self.mask_keep_prob > 0.0 && self.mask_keep_prob < 1.0) {
            return Err(GmaError::Config("mask_keep_prob must lie in (0, 1)".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(GmaError::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(GmaError::Config("feature_noise must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.coreference_prob) {
            return Err(GmaError::Config("coreference_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
