//! The JSON run configuration shared by every command.
//!
//! Every section is optional and falls back to its defaults, so `{}` is a
//! valid config. Relative `data_dir` and `output_dir` resolve against the
//! config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentProfile, TtaConfig};
use crate::data::SynthConfig;
use crate::descriptor::EmbedMode;
use crate::evalfuse::TtaMode;
use crate::extractor::INPUT_SIZE;
use crate::trainer::{HeadSpec, StageConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Synthetic data written by `gen-synth`: training identities plus held-out
/// identities for verification pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    #[serde(flatten)]
    pub dataset: SynthConfig,
    pub eval_identities: usize,
    /// Positive pairs, and as many negatives, in the held-out manifest.
    pub eval_pairs_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            dataset: SynthConfig::default(),
            eval_identities: 20,
            eval_pairs_per_class: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Embed with the EMA head; false uses the live head.
    pub use_ema: bool,
    pub embed_mode: EmbedMode,
    pub tta_mode: TtaMode,
    pub tta_seed: u64,
    pub tta: TtaConfig,
    pub fusion_weights: Option<Vec<f64>>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            use_ema: true,
            embed_mode: EmbedMode::WithFc,
            tta_mode: TtaMode::MeanSim,
            tta_seed: 0,
            tta: TtaConfig::default(),
            fusion_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub extractor_seed: u64,
    pub synth: SynthSection,
    pub head: HeadSpec,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    /// Extra augmentation profiles by name; the builtin names are always
    /// available and may be overridden here.
    pub profiles: BTreeMap<String, AugmentProfile>,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            extractor_seed: 0,
            synth: SynthSection::default(),
            head: HeadSpec::default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            profiles: BTreeMap::new(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: shown.clone(),
            source,
        })?;
        let mut cfg = Self::from_json(&text).map_err(|source| ConfigError::Parse {
            path: shown,
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for dir in [&mut cfg.data_dir, &mut cfg.output_dir] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A custom profile by name, else the builtin of that name.
    pub fn profile(&self, name: &str) -> Result<AugmentProfile, ConfigError> {
        match self.profiles.get(name) {
            Some(p) => Ok(p.clone()),
            None => AugmentProfile::builtin(name).map_err(|e| ConfigError::Invalid(e.to_string())),
        }
    }

    pub fn stage(&self, stage: u8) -> Result<&StageConfig, ConfigError> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            _ => Err(ConfigError::Invalid(format!("stage must be 1 or 2, got {stage}"))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.synth.dataset.validate().map_err(|e| invalid(&e))?;
        if self.synth.eval_identities == 1 {
            return Err(ConfigError::Invalid("eval_identities must be 0 or >= 2".into()));
        }
        for p in self.profiles.values() {
            p.validate().map_err(|e| invalid(&e))?;
        }
        for (label, stage) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            stage
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("{label}: {e}")))?;
            let profile = self
                .profile(&stage.augment_profile)
                .map_err(|e| ConfigError::Invalid(format!("{label}: {e}")))?;
            if profile.final_size != INPUT_SIZE {
                return Err(ConfigError::Invalid(format!(
                    "{label}: profile {:?} must produce {INPUT_SIZE}px images",
                    profile.name
                )));
            }
        }
        if self.head.branch_dim == 0 {
            return Err(ConfigError::Invalid("head.branch_dim must be positive".into()));
        }
        for spec in [self.head.branch_a, self.head.branch_b] {
            spec.validate().map_err(|e| invalid(&e))?;
        }
        if self.eval.tta.views.is_empty() {
            return Err(ConfigError::Invalid("eval.tta.views must not be empty".into()));
        }
        if let Some(w) = &self.eval.fusion_weights {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(ConfigError::Invalid(
                    "fusion_weights must be non-negative with a positive sum".into(),
                ));
            }
        }
        Ok(())
    }
}
