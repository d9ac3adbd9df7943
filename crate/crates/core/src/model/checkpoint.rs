//! JSON checkpoints: weights, config, vocabulary and provenance in one file.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LmSnapshot, ModelConfig, ModelError, Provenance, TinyLm};
use crate::corpus::{Vocabulary, NUM_SPECIALS};

pub const CHECKPOINT_FORMAT: &str = "fairpriv-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format {format:?} version {version}")]
    Format { format: String, version: u32 },
    #[error("vocabulary hash mismatch: stored {stored}, computed {computed}")]
    VocabHash { stored: String, computed: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    /// Regular tokens only; specials are implied.
    vocab_tokens: Vec<String>,
    lowercase: bool,
    vocab_hash: String,
    provenance: Provenance,
    params: Vec<f64>,
}

impl LmSnapshot {
    pub fn to_json(&self) -> Result<String, CheckpointError> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.model.config().clone(),
            vocab_tokens: self.vocab.tokens()[NUM_SPECIALS..].to_vec(),
            lowercase: self.vocab.lowercase(),
            vocab_hash: self.vocab.hash(),
            provenance: self.provenance.clone(),
            params: self.model.params().to_vec(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Format {
                format: file.format,
                version: file.version,
            });
        }
        let vocab = Vocabulary::from_tokens(file.vocab_tokens, file.lowercase);
        let computed = vocab.hash();
        if computed != file.vocab_hash {
            return Err(CheckpointError::VocabHash {
                stored: file.vocab_hash,
                computed,
            });
        }
        let model = TinyLm::from_parts(file.config, file.params)?;
        Ok(LmSnapshot::new(model, Arc::new(vocab), file.provenance)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()?).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
