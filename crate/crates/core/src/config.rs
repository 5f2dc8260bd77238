//! Flat `key = value` pipeline configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown or repeated keys are rejected.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anonymizer_training::TrainConfig;
use crate::batch_builder::ExpressionMode;
use crate::error::{io_err, PpError, Result};

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(f64, usize, u64, u32, bool, String);

impl ConfigValue for Vec<String> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let items: Vec<String> = s.split(',').map(|p| p.trim().to_string()).collect();
        if items.iter().any(String::is_empty) {
            return Err("empty list item".into());
        }
        Ok(items)
    }

    fn render(&self) -> String {
        self.join(",")
    }
}

impl ConfigValue for ExpressionMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: PpError| e.to_string())
    }

    fn render(&self) -> String {
        match self {
            ExpressionMode::Matched => "matched".into(),
            ExpressionMode::Agnostic => "agnostic".into(),
        }
    }
}

macro_rules! pipeline_config {
    ($($(#[doc = $doc:literal])* $key:ident: $ty:ty = $default:expr,)*) => {
        /// All pipeline settings. Field names are the config-file keys.
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        pub struct PipelineConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for PipelineConfig {
            fn default() -> Self {
                Self { $($key: $default,)* }
            }
        }

        impl PipelineConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
                match key {
                    $(stringify!($key) => self.$key = ConfigValue::parse_value(value)?,)*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            /// Canonical text form listing every key in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), ConfigValue::render(&self.$key)));)*
                out
            }
        }
    };
}

pipeline_config! {
    seed: u64 = 42,
    /// Triplet weight in the anonymizer objective.
    alpha: f64 = 0.01,
    /// Passes over the batch set while training the anonymizer.
    epochs: usize = 30,
    triplet_margin: f64 = 0.2,
    learning_rate: f64 = 0.001,
    batch_k: u32 = 2,
    batches_per_epoch: usize = 8,
    expression_mode: ExpressionMode = ExpressionMode::Matched,
    /// Images (or clips) per optimizer step outside the triplet trainer.
    minibatch: usize = 16,
    pretrain_epochs: usize = 10,
    pretrain_learning_rate: f64 = 0.003,
    sim_threshold: f64 = 0.7,
    matcher_threshold: f64 = 0.5,
    blur_sigma: f64 = 0.4,
    blur_baseline: bool = true,
    denoise_enabled: bool = true,
    output_dir: String = "ppfer_run".to_string(),
    resolution: usize = 16,
    identities: usize = 64,
    expressions: Vec<String> = crate::synth::DEFAULT_EXPRESSIONS.iter().map(|s| s.to_string()).collect(),
    videos: usize = 60,
    frames_per_video: usize = 6,
    max_faces_per_video: usize = 2,
    stills_per_class: usize = 60,
    noise: f64 = 0.02,
    unet_base: usize = 6,
    classifier_width: usize = 8,
    embed_dim: usize = 64,
    embed_grid: usize = 4,
    /// Projection seed of the frozen embedder used by the anonymizer objective.
    embedder_seed: u64 = 1001,
    /// Projection seed of the embedder used for tracking and matching.
    matcher_seed: u64 = 2002,
    fexp_epochs: usize = 60,
    fexp_learning_rate: f64 = 0.003,
    denoise_epochs: usize = 40,
    denoise_learning_rate: f64 = 0.001,
    clip_len: usize = 4,
    fer_epochs: usize = 80,
    fer_learning_rate: f64 = 0.003,
    fer_train_fraction: f64 = 0.7,
    recovery_epochs: usize = 10,
    recovery_learning_rate: f64 = 0.003,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| PpError::Parse { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key {key:?} given twice")));
            }
            cfg.set(key, value).map_err(|m| err(format!("{key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// SHA-256 of the canonical text without `output_dir`, so a relocated
    /// run keeps its hash.
    pub fn hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("output_dir "))
            .flat_map(|l| [l, "\n"])
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let bad = |m: &str| Err(PpError::Validation(m.to_string()));
        if !(-1.0..=1.0).contains(&self.sim_threshold) || !(-1.0..=1.0).contains(&self.matcher_threshold) {
            return bad("similarity thresholds must lie in [-1, 1]");
        }
        if !(self.blur_sigma > 0.0) {
            return bad("blur_sigma must be positive");
        }
        if !(self.fer_train_fraction > 0.0 && self.fer_train_fraction < 1.0) {
            return bad("fer_train_fraction must lie in (0, 1)");
        }
        if self.resolution % 4 != 0 || self.embed_grid == 0 || self.resolution % self.embed_grid != 0 {
            return bad("resolution must be divisible by 4 and by embed_grid");
        }
        let sizes = [
            self.batches_per_epoch,
            self.identities,
            self.videos,
            self.frames_per_video,
            self.max_faces_per_video,
            self.stills_per_class,
            self.unet_base,
            self.classifier_width,
            self.embed_dim,
            self.clip_len,
        ];
        if sizes.contains(&0) {
            return bad("sizes and counts must be positive");
        }
        if self.output_dir.is_empty() {
            return bad("output_dir must not be empty");
        }
        Ok(())
    }

    /// Settings of the anonymizer's identity-suppression stage.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            epochs: self.epochs,
            triplet_margin: self.triplet_margin,
            learning_rate: self.learning_rate,
            seed: self.seed,
            batch_k: self.batch_k,
            minibatch: self.minibatch,
        }
    }

    /// The anonymizer settings with epochs, learning rate and seed replaced.
    pub fn stage_config(&self, epochs: usize, learning_rate: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate,
            seed,
            ..self.train_config()
        }
    }
}
