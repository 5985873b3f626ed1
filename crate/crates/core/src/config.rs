//! Run configuration files.
//!
//! A run is described by one TOML file with a section per concern:
//!
//! ```toml
//! seed = 1
//! output_dir = "runs/tiny"
//!
//! [data]
//! source = "synthetic"
//! sets = 500
//!
//! [corpus]
//! max_tokens = 8
//!
//! [selection]
//! level = "word"
//! gamma = 0.3
//!
//! [train]
//! max_epochs = 10
//! ```
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{CorpusConfig, DatasetFormat};
use crate::error::{CsnError, Result};
use crate::model::ModelConfig;
use crate::selection::SelectionConfig;
use crate::train::TrainConfig;

/// Environment variable that overrides the root of every output directory.
pub const OUTPUT_ROOT_ENV: &str = "CSN_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Persona,
    Cmudog,
    Records,
}

impl DataSource {
    pub fn format(self) -> Option<DatasetFormat> {
        match self {
            Self::Synthetic => None,
            Self::Persona => Some(DatasetFormat::Persona),
            Self::Cmudog => Some(DatasetFormat::Cmudog),
            Self::Records => Some(DatasetFormat::Records),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the split files (file-based sources).
    pub dir: Option<PathBuf>,
    /// Number of synthetic candidate sets.
    pub sets: usize,
    /// Seed of the synthetic corpus; the run seed when absent.
    pub seed: Option<u64>,
    /// Synthetic corpora are split into consecutive train/valid/test slices.
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            dir: None,
            sets: 500,
            seed: None,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden: usize,
    pub share_cnn: bool,
    pub embed_dropout: f64,
    /// Pretrained embedding files whose vectors are concatenated per token.
    pub pretrained: Vec<PathBuf>,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: 8,
            share_cnn: false,
            embed_dropout: 0.2,
            pretrained: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub corpus: CorpusConfig,
    pub model: ModelDims,
    pub selection: SelectionConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            corpus: CorpusConfig::default(),
            model: ModelDims::default(),
            selection: SelectionConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| CsnError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CsnError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CsnError::Config(msg) => CsnError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Checks every section, including the CNN geometry, without touching
    /// the filesystem.
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        self.model_config(2).validate()?;
        let d = &self.data;
        if d.source == DataSource::Synthetic && d.sets == 0 {
            return Err(CsnError::Config("data.sets must be >= 1".into()));
        }
        if d.source != DataSource::Synthetic && d.dir.is_none() {
            return Err(CsnError::Config("data.dir is required for file-based sources".into()));
        }
        let fractions = [d.valid_fraction, d.test_fraction];
        if fractions.iter().any(|f| !(0.0..1.0).contains(f)) || d.valid_fraction + d.test_fraction >= 1.0 {
            return Err(CsnError::Config("data fractions must be in [0, 1) and sum below 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.model.embed_dim,
            hidden: self.model.hidden,
            max_turns: self.corpus.max_turns,
            max_sentences: self.corpus.max_sentences,
            max_tokens: self.corpus.max_tokens,
            selection: self.selection.clone(),
            share_cnn: self.model.share_cnn,
            embed_dropout: self.model.embed_dropout,
        }
    }

    /// Output directory, re-rooted under the override root when set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Joins relative output paths onto the override root, if any.
pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selection::SelectionLevel;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn dotted_and_sectioned_keys_agree() {
        let a = RunConfig::from_toml("selection.level = \"sentence\"\ncorpus.max_tokens = 8\n").unwrap();
        let b = RunConfig::from_toml("[selection]\nlevel = \"sentence\"\n[corpus]\nmax_tokens = 8\n").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selection.level, SelectionLevel::Sentence);
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.data.seed = Some(3);
        c.selection.eta = 0.5;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn geometry_and_unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("corpus.max_tokens = 3"),
            Err(CsnError::Config(_))
        ));
        assert!(RunConfig::from_toml("model.colour = 3").is_err());
        assert!(RunConfig::from_toml("selection.gamma = 2.0").is_err());
        assert!(RunConfig::from_toml("data.source = \"records\"").is_err());
    }
}
