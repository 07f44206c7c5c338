//! Self-describing JSON container for a trained model, its optional router
//! bank and the preprocessing it expects.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::marketdata::{DatasetConfig, Normalizer, FEATURE_COUNT, FEATURE_NAMES};
use crate::moe::MoEModel;
use crate::router::RouterBank;

pub const CHECKPOINT_FORMAT: &str = "mixtrade-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(#[from] serde_json::Error),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub feature_names: Vec<String>,
    pub normalizer: Normalizer,
    /// Whether the return head was trained; when false the strategy ignores
    /// predicted returns.
    pub multi_task: bool,
    pub model: MoEModel,
    /// Absent when routing is disabled; inference then uses every expert.
    pub router: Option<RouterBank>,
}

impl Checkpoint {
    pub fn new(
        seed: u64,
        dataset: DatasetConfig,
        normalizer: Normalizer,
        multi_task: bool,
        model: MoEModel,
        router: Option<RouterBank>,
    ) -> Result<Self, CheckpointError> {
        let ckpt = Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            dataset,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            normalizer,
            multi_task,
            model,
            router,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<(), CheckpointError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Incompatible(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Incompatible(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.feature_names.iter().map(String::as_str).ne(FEATURE_NAMES.iter().copied()) {
            return Err(CheckpointError::Incompatible(format!(
                "feature schema {:?} differs from {:?}",
                self.feature_names, FEATURE_NAMES
            )));
        }
        let expected = (self.dataset.window + 1) * FEATURE_COUNT;
        if self.model.config.input_dim != expected {
            return Err(CheckpointError::Incompatible(format!(
                "model input width {} does not match window {} ({} inputs)",
                self.model.config.input_dim, self.dataset.window, expected
            )));
        }
        if let Some(bank) = &self.router {
            if bank.n_experts() != self.model.n_experts() {
                return Err(CheckpointError::Incompatible(format!(
                    "router bank gates {} experts, model has {}",
                    bank.n_experts(),
                    self.model.n_experts()
                )));
            }
        }
        Ok(())
    }

    /// Errors unless `normalizer` and `dataset` equal the stored ones.
    pub fn check_data(&self, dataset: &DatasetConfig, normalizer: &Normalizer) -> Result<(), CheckpointError> {
        if &self.dataset != dataset {
            return Err(CheckpointError::Incompatible(format!(
                "checkpoint expects {:?}, data uses {:?}",
                self.dataset, dataset
            )));
        }
        if &self.normalizer != normalizer {
            return Err(CheckpointError::Incompatible(
                "normalization statistics differ from the checkpoint's".to_string(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ckpt: Self = serde_json::from_str(text)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }
}
