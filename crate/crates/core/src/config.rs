//! Pipeline configuration files (TOML).
//!
//! ```toml
//! threshold = 0.5
//! backend = "mock"        # mock | remote | offline
//! require_llm = false
//!
//! [fusion]
//! w_heuristic = 0.5
//! w_llm = 0.5
//!
//! [detector]              # see DetectorConfig
//! min_urgency_hits = 2
//!
//! [remote]                # see BackendConfig
//! model_name = "gpt-4"
//! timeout = 30.0
//!
//! [prompt]                # see PromptTemplate
//! max_body_chars = 8000
//! ```
//!
//! Every section and key is optional; omitted values take their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{BackendChoice, FusionWeights};
use crate::gateway::{BackendConfig, PromptTemplate};
use crate::redflag::DetectorConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub threshold: f64,
    pub backend: BackendChoice,
    /// Fail the classification when the LLM backend fails, instead of
    /// falling back to the heuristic score.
    pub require_llm: bool,
    pub fusion: FusionWeights,
    pub detector: DetectorConfig,
    pub remote: BackendConfig,
    pub prompt: PromptTemplate,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            backend: BackendChoice::Mock,
            require_llm: false,
            fusion: FusionWeights::default(),
            detector: DetectorConfig::default(),
            remote: BackendConfig::default(),
            prompt: PromptTemplate::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ConfigError::Invalid(format!(
                "threshold must be in [0, 1], got {}",
                self.threshold
            )));
        }
        self.detector.validate()?;
        self.prompt.validate()?;
        if self.backend == BackendChoice::Remote {
            self.remote.validate()?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }
}
