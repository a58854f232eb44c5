//! JSON run configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::compress::CompressConfig;
use crate::error::{Error, Result};
use crate::model::TransformerConfig;
use crate::outliers::AnalysisConfig;
use crate::train::TrainConfig;

/// Everything needed to reproduce an experiment. Unknown keys are rejected
/// at every level; absent keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub compression: CompressConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Ties the model to the dataset: `vocab_size` comes from the
    /// tokenizer and the context length from the training window.
    pub fn bind_dataset(&mut self, vocab_size: usize) {
        self.model.vocab_size = vocab_size;
        self.model.block_size = self.train.block_size;
    }

    /// Applies a seed override to both initialization and sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.analysis.validate()?;
        self.compression.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"model": {"n_layers": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"model": {"variant": "ctx_scaling"}, "train": {"max_iters": 10}}"#).unwrap();
        assert_eq!(c.model.d_model, 256);
        assert_eq!(c.train.max_iters, 10);
        assert_eq!(c.analysis.tau, 1000.0);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
