//! Experiment configuration, the six training arms, the per-seed pipeline
//! and comparison tables.

mod pipeline;
mod report;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cda::AugmentMode;
use crate::mia::AttackConfig;
use crate::model::{DEBIAS_DROPOUT, DEFAULT_DROPOUT};
use crate::trainer::{DPConfig, OptimizerKind, TrainConfig};

pub use pipeline::{
    save_seed_artifacts, OutputDir, PipelineError,
    run_arm, run_matrix, run_matrix_with, EpochLeakage, MatrixOutput, RunRecord, RunStatus, SeedContext,
    SeedSummary,
};
pub use report::{format_tables, MatrixReport, ReportRow};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown profile {0:?} (expected desk or overfit)")]
    UnknownProfile(String),
    #[error("unknown arm {0:?}")]
    UnknownArm(String),
    #[error("config parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSettings {
    /// Sentences in the private (fine-tuning) corpus.
    pub sentences: usize,
    /// Sentences in the disjoint public corpus used to pretrain the base.
    pub public_sentences: usize,
    pub gender_skew: f64,
    pub vocab_size: usize,
    pub chunk_size: usize,
    pub lowercase: bool,
    pub split_ratio: f64,
    /// Keep at most this many private chunks (before splitting).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_chunks: Option<usize>,
    /// Fraction of private sentences kept by uniform subsampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub lora_rank: usize,
    pub init_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub dp_accumulation_steps: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSettings {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Run the bias suite on final snapshots.
    pub bias: bool,
    pub permutation_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: String,
    pub corpus: CorpusSettings,
    pub model: ModelSettings,
    pub pretrain: PretrainSettings,
    pub train: TrainSettings,
    pub dp: DpSettings,
    pub attack: AttackConfig,
    pub eval: EvalSettings,
}

impl ExperimentConfig {
    /// Small synthetic setup whose full matrix finishes in minutes.
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            corpus: CorpusSettings {
                sentences: 2000,
                public_sentences: 2000,
                gender_skew: 0.9,
                vocab_size: 2000,
                chunk_size: 64,
                lowercase: true,
                split_ratio: 0.8,
                max_chunks: None,
                subsample: None,
            },
            model: ModelSettings {
                d_model: 64,
                n_layers: 2,
                n_heads: 2,
                lora_rank: 4,
                init_std: 0.02,
            },
            pretrain: PretrainSettings {
                epochs: 4,
                learning_rate: 3e-3,
                batch_size: 2,
                accumulation_steps: 4,
                dropout: DEFAULT_DROPOUT,
            },
            train: TrainSettings {
                epochs: 3,
                learning_rate: 1e-3,
                batch_size: 2,
                accumulation_steps: 2,
                dp_accumulation_steps: 8,
                optimizer: OptimizerKind::Adam,
            },
            dp: DpSettings {
                clip_norm: 1.0,
                noise_multiplier: 1.0,
                delta: 1e-5,
            },
            attack: AttackConfig::default(),
            eval: EvalSettings {
                bias: true,
                permutation_samples: 10_000,
            },
        }
    }

    /// Long training on a tiny corpus so that memorization is measurable.
    pub fn overfit() -> Self {
        let desk = Self::desk();
        Self {
            profile: "overfit".into(),
            corpus: CorpusSettings {
                sentences: 700,
                public_sentences: 1200,
                chunk_size: 32,
                max_chunks: Some(125),
                ..desk.corpus
            },
            model: ModelSettings {
                d_model: 32,
                lora_rank: 8,
                ..desk.model
            },
            pretrain: PretrainSettings {
                epochs: 4,
                ..desk.pretrain
            },
            train: TrainSettings {
                epochs: 50,
                learning_rate: 2e-3,
                ..desk.train
            },
            eval: EvalSettings {
                bias: false,
                ..desk.eval
            },
            ..desk
        }
    }

    pub fn profile(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "overfit" => Ok(Self::overfit()),
            other => Err(ConfigError::UnknownProfile(other.into())),
        }
    }

    /// Starts from `base` and overrides every key present in `toml_text`.
    pub fn merged(base: &Self, toml_text: &str) -> Result<Self, ConfigError> {
        let mut value = toml::Value::try_from(base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let overlay: toml::Value = toml::from_str(toml_text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge(&mut value, overlay);
        value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArmLabel {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "cda")]
    Cda,
    #[serde(rename = "dropout")]
    Dropout,
    #[serde(rename = "dp")]
    Dp,
    #[serde(rename = "cda+dp")]
    CdaDp,
    #[serde(rename = "dropout+dp")]
    DropoutDp,
}

impl ArmLabel {
    pub const ALL: [ArmLabel; 6] = [
        ArmLabel::Baseline,
        ArmLabel::Cda,
        ArmLabel::Dropout,
        ArmLabel::Dp,
        ArmLabel::CdaDp,
        ArmLabel::DropoutDp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArmLabel::Baseline => "baseline",
            ArmLabel::Cda => "cda",
            ArmLabel::Dropout => "dropout",
            ArmLabel::Dp => "dp",
            ArmLabel::CdaDp => "cda+dp",
            ArmLabel::DropoutDp => "dropout+dp",
        }
    }

    pub fn uses_cda(self) -> bool {
        matches!(self, ArmLabel::Cda | ArmLabel::CdaDp)
    }

    pub fn uses_dropout(self) -> bool {
        matches!(self, ArmLabel::Dropout | ArmLabel::DropoutDp)
    }

    pub fn uses_dp(self) -> bool {
        matches!(self, ArmLabel::Dp | ArmLabel::CdaDp | ArmLabel::DropoutDp)
    }
}

impl fmt::Display for ArmLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArmLabel {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArmLabel::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownArm(s.into()))
    }
}

/// A fully resolved training arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentArm {
    pub label: ArmLabel,
    pub train: TrainConfig,
    pub dp: DPConfig,
    pub augmentation: Option<AugmentMode>,
    pub dropout: f64,
}

impl ExperimentArm {
    pub fn resolve(label: ArmLabel, cfg: &ExperimentConfig, seed: u64) -> Self {
        let dp = label.uses_dp();
        let dropout = if label.uses_dropout() {
            DEBIAS_DROPOUT
        } else {
            DEFAULT_DROPOUT
        };
        let t = &cfg.train;
        Self {
            label,
            train: TrainConfig {
                epochs: t.epochs,
                learning_rate: t.learning_rate,
                batch_size: t.batch_size,
                accumulation_steps: if dp { t.dp_accumulation_steps } else { t.accumulation_steps },
                optimizer: t.optimizer,
                dropout,
                seed: derive_seed(seed, "train"),
                audit_clipping: dp,
            },
            dp: DPConfig {
                enabled: dp,
                clip_norm: cfg.dp.clip_norm,
                noise_multiplier: cfg.dp.noise_multiplier,
                sampling_rate: 1.0,
                delta: cfg.dp.delta,
            },
            augmentation: label.uses_cda().then_some(AugmentMode::TwoSided),
            dropout,
        }
    }
}

/// Everything that determines a run's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub arm: ArmLabel,
    pub seed: u64,
}

impl RunConfig {
    pub fn hash(&self) -> String {
        sha256_json(self)
    }
}

pub(crate) fn sha256_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// Independent sub-seed for one pipeline stage.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_resolution_is_total() {
        let cfg = ExperimentConfig::desk();
        let triples: Vec<(bool, bool, bool)> = ArmLabel::ALL
            .iter()
            .map(|&l| {
                let a = ExperimentArm::resolve(l, &cfg, 0);
                assert_eq!(a.dp.enabled, l.uses_dp());
                assert_eq!(a.train.dropout, a.dropout);
                (a.augmentation.is_some(), a.dropout == DEBIAS_DROPOUT, a.dp.enabled)
            })
            .collect();
        assert_eq!(
            triples,
            vec![
                (false, false, false),
                (true, false, false),
                (false, true, false),
                (false, false, true),
                (true, false, true),
                (false, true, true),
            ]
        );
        let cda = ExperimentArm::resolve(ArmLabel::Cda, &cfg, 0);
        assert_eq!(cda.augmentation, Some(AugmentMode::TwoSided));
        assert_eq!(ExperimentArm::resolve(ArmLabel::Baseline, &cfg, 0).dropout, 0.1);
    }

    #[test]
    fn labels_round_trip() {
        for l in ArmLabel::ALL {
            assert_eq!(l.as_str().parse::<ArmLabel>().unwrap(), l);
            let json = serde_json::to_string(&l).unwrap();
            assert_eq!(json, format!("\"{l}\""));
        }
        assert!("nope".parse::<ArmLabel>().is_err());
    }

    #[test]
    fn toml_overlay_merges_deeply() {
        let base = ExperimentConfig::desk();
        let merged = ExperimentConfig::merged(&base, "[train]\nepochs = 7\n[corpus]\nmax_chunks = 10\n").unwrap();
        assert_eq!(merged.train.epochs, 7);
        assert_eq!(merged.train.learning_rate, base.train.learning_rate);
        assert_eq!(merged.corpus.max_chunks, Some(10));
        assert!(ExperimentConfig::merged(&base, "[train]\nbogus = 1\n").is_err());
        let round = ExperimentConfig::merged(&base, &base.to_toml()).unwrap();
        assert_eq!(round, base);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let rc = RunConfig {
            experiment: ExperimentConfig::overfit(),
            arm: ArmLabel::Dp,
            seed: 1,
        };
        assert_eq!(rc.hash(), rc.clone().hash());
        let other = RunConfig { seed: 2, ..rc.clone() };
        assert_ne!(rc.hash(), other.hash());
    }
}
