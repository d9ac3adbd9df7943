use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{derive_seed, sha256_json, ArmLabel, ExperimentArm, ExperimentConfig, MatrixReport, RunConfig};
use crate::bias::{becpro_score, seat_suite, stereoset_score, BiasError, BiasScorecard, PermutationMode};
use crate::cda::{augment_corpus, CdaError, CompiledTable, OovPolicy, WordPairTable};
use crate::corpus::{
    build_vocabulary, make_synthetic_corpus, split_chunks, subsample, tokenize_and_chunk, CorpusError,
    CorpusSplit, TokenSequence, Vocabulary,
};
use crate::data;
use crate::mia::{AttackOutcome, AttackSummary, MiaError, ReferenceCache};
use crate::model::{CheckpointError, LmSnapshot, ModelConfig, ModelError, Provenance, TinyLm, TrainScope};
use crate::trainer::{train, DPConfig, EpochMetrics, PrivacyReport, TrainConfig, TrainError};
use crate::utility::{perplexity, PerplexityResult, UtilityError, UtilityReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Cda(#[from] CdaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Attack(#[from] MiaError),
    #[error(transparent)]
    Bias(#[from] BiasError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("seed preparation failed: {0}")]
    SeedPreparation(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Shared inputs for every arm trained under one seed: data, vocabulary,
/// the pretrained base (also the attack reference) and the fresh init.
pub struct SeedContext {
    pub seed: u64,
    pub vocab: Arc<Vocabulary>,
    pub split: CorpusSplit,
    pub public: Vec<TokenSequence>,
    pub init: LmSnapshot,
    pub base: LmSnapshot,
    pub pairs: WordPairTable,
    pub compiled: CompiledTable,
    pub summary: SeedSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub vocab_size: usize,
    pub vocab_hash: String,
    pub train_chunks: usize,
    pub dev_chunks: usize,
    pub public_chunks: usize,
    pub pretrain: Vec<EpochMetrics>,
    pub init_perplexity: PerplexityResult,
    pub base_perplexity: PerplexityResult,
}

impl SeedContext {
    pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Self, PipelineError> {
        let c = &cfg.corpus;
        let mut private = make_synthetic_corpus(derive_seed(seed, "private"), c.sentences, c.gender_skew)?;
        if let Some(f) = c.subsample {
            private = subsample(&private, f, derive_seed(seed, "subsample"));
        }
        let public = make_synthetic_corpus(derive_seed(seed, "public"), c.public_sentences, c.gender_skew)?;
        let all: Vec<String> = private.iter().chain(&public).cloned().collect();
        let vocab = Arc::new(build_vocabulary(&all, c.vocab_size, c.lowercase)?);

        let mut chunks = tokenize_and_chunk(&private, &vocab, c.chunk_size)?;
        if let Some(max) = c.max_chunks {
            chunks.truncate(max);
        }
        let split = split_chunks(chunks, c.split_ratio, derive_seed(seed, "split"))?;
        let public_chunks = tokenize_and_chunk(&public, &vocab, c.chunk_size)?;

        let m = &cfg.model;
        let model_cfg = ModelConfig {
            vocab_size: vocab.len(),
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            context_len: c.chunk_size,
            dropout: cfg.pretrain.dropout,
            lora_rank: m.lora_rank,
            init_std: m.init_std,
            seed: derive_seed(seed, "init"),
            scope: TrainScope::Full,
        };
        let init_model = TinyLm::new(model_cfg)?;
        let init = LmSnapshot::new(
            init_model.clone(),
            vocab.clone(),
            Provenance {
                arm: "init".into(),
                note: "fresh random initialization".into(),
                ..Provenance::default()
            },
        )?;

        let p = &cfg.pretrain;
        let pretrain_cfg = TrainConfig {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            accumulation_steps: p.accumulation_steps,
            optimizer: cfg.train.optimizer,
            dropout: p.dropout,
            seed: derive_seed(seed, "pretrain"),
            audit_clipping: false,
        };
        let public_split = CorpusSplit {
            train: public_chunks,
            dev: Vec::new(),
            ratio: 1.0,
        };
        let pre = train(init_model, vocab.clone(), &public_split, &pretrain_cfg, &DPConfig::default(), "pretrain")?;
        let base_model = pre.final_snapshot().to_model().with_scope(TrainScope::Lora);
        let base = LmSnapshot::new(
            base_model,
            vocab.clone(),
            Provenance {
                arm: "base".into(),
                epochs: p.epochs,
                steps: pre.privacy.steps,
                note: "pretrained on the public corpus; attack reference".into(),
            },
        )?;

        let pairs = data::default_pair_table(c.lowercase)?;
        let compiled = pairs.compile(&vocab, OovPolicy::MapToUnknown)?;
        let summary = SeedSummary {
            seed,
            vocab_size: vocab.len(),
            vocab_hash: vocab.hash(),
            train_chunks: split.train.len(),
            dev_chunks: split.dev.len(),
            public_chunks: public_split.train.len(),
            pretrain: pre.metrics,
            init_perplexity: perplexity(&init, &split.dev)?,
            base_perplexity: perplexity(&base, &split.dev)?,
        };
        Ok(Self {
            seed,
            vocab,
            split,
            public: public_split.train,
            init,
            base,
            pairs,
            compiled,
            summary,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Incomplete { error: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLeakage {
    pub epoch: usize,
    pub standard: AttackSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cda_adjusted: Option<AttackSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: ArmLabel,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub resolved: ExperimentArm,
    pub status: RunStatus,
    pub epochs: Vec<EpochMetrics>,
    pub leakage: Vec<EpochLeakage>,
    pub end_attack: Option<AttackSummary>,
    pub end_attack_cda: Option<AttackSummary>,
    pub bias: Option<BiasScorecard>,
    pub utility: Option<UtilityReport>,
    pub privacy: Option<PrivacyReport>,
    /// Hash of every field except the timestamps and this hash.
    pub metrics_hash: String,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Serialize)]
struct HashedView<'a> {
    arm: ArmLabel,
    seed: u64,
    config_hash: &'a str,
    config: &'a RunConfig,
    resolved: &'a ExperimentArm,
    status: &'a RunStatus,
    epochs: &'a [EpochMetrics],
    leakage: &'a [EpochLeakage],
    end_attack: &'a Option<AttackSummary>,
    end_attack_cda: &'a Option<AttackSummary>,
    bias: &'a Option<BiasScorecard>,
    utility: &'a Option<UtilityReport>,
    privacy: &'a Option<PrivacyReport>,
}

impl RunRecord {
    fn new(cfg: &ExperimentConfig, arm: ArmLabel, seed: u64) -> Self {
        let config = RunConfig {
            experiment: cfg.clone(),
            arm,
            seed,
        };
        Self {
            arm,
            seed,
            config_hash: config.hash(),
            resolved: ExperimentArm::resolve(arm, cfg, seed),
            config,
            status: RunStatus::Complete,
            epochs: Vec::new(),
            leakage: Vec::new(),
            end_attack: None,
            end_attack_cda: None,
            bias: None,
            utility: None,
            privacy: None,
            metrics_hash: String::new(),
            started_at: now(),
            finished_at: 0,
        }
    }

    pub fn compute_metrics_hash(&self) -> String {
        sha256_json(&HashedView {
            arm: self.arm,
            seed: self.seed,
            config_hash: &self.config_hash,
            config: &self.config,
            resolved: &self.resolved,
            status: &self.status,
            epochs: &self.epochs,
            leakage: &self.leakage,
            end_attack: &self.end_attack,
            end_attack_cda: &self.end_attack_cda,
            bias: &self.bias,
            utility: &self.utility,
            privacy: &self.privacy,
        })
    }

    fn finish(mut self, result: Result<(), PipelineError>) -> Self {
        if let Err(e) = result {
            log::error!("{} seed {} failed: {e}", self.arm, self.seed);
            self.status = RunStatus::Incomplete { error: e.to_string() };
        }
        self.finished_at = now();
        self.metrics_hash = self.compute_metrics_hash();
        self
    }

    pub fn is_complete(&self) -> bool {
        self.status == RunStatus::Complete
    }

    /// Parses a JSON-lines run log.
    pub fn read_log(path: &Path) -> Result<Vec<RunRecord>, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| PipelineError::Io {
                    path: path.to_path_buf(),
                    source: std::io::Error::other(e),
                })
            })
            .collect()
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub root: PathBuf,
    pub checkpoints: bool,
}

impl OutputDir {
    fn arm_dir(&self, arm: ArmLabel, seed: u64) -> Result<PathBuf, PipelineError> {
        let dir = self.root.join(format!("{}-seed{seed}", arm.as_str().replace('+', "-")));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    pub fn append_record(&self, record: &RunRecord) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let path = self.root.join("runs.jsonl");
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&path))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| io_err(path)(e.into()))?;
        writeln!(w).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_trace(path: &Path, outcome: &AttackOutcome) -> Result<(), PipelineError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    outcome.write_trace(BufWriter::new(f))?;
    Ok(())
}

/// Trains one arm on a prepared seed and evaluates it.
pub fn run_arm(
    ctx: &SeedContext,
    reference: &ReferenceCache<'_>,
    cfg: &ExperimentConfig,
    arm: ArmLabel,
    out: Option<&OutputDir>,
) -> RunRecord {
    let mut record = RunRecord::new(cfg, arm, ctx.seed);
    let result = run_arm_inner(ctx, reference, cfg, &mut record, out);
    let record = record.finish(result);
    if let Some(o) = out {
        if let Err(e) = o.append_record(&record) {
            log::error!("cannot persist run record: {e}");
        }
    }
    record
}

fn run_arm_inner(
    ctx: &SeedContext,
    reference: &ReferenceCache<'_>,
    cfg: &ExperimentConfig,
    record: &mut RunRecord,
    out: Option<&OutputDir>,
) -> Result<(), PipelineError> {
    let arm = record.resolved.clone();
    let train_split = match arm.augmentation {
        Some(mode) => CorpusSplit {
            train: augment_corpus(&ctx.split.train, &ctx.pairs, &ctx.vocab, mode, OovPolicy::MapToUnknown)?,
            dev: ctx.split.dev.clone(),
            ratio: ctx.split.ratio,
        },
        None => ctx.split.clone(),
    };
    log::info!(
        "{} seed {}: {} training chunks",
        arm.label,
        ctx.seed,
        train_split.train.len()
    );
    let outcome = train(
        ctx.base.to_model(),
        ctx.vocab.clone(),
        &train_split,
        &arm.train,
        &arm.dp,
        arm.label.as_str(),
    )?;
    record.epochs = outcome.metrics.clone();
    record.privacy = Some(outcome.privacy.clone());

    let cda = arm.augmentation.map(|_| &ctx.compiled);
    let mut last: Option<(AttackOutcome, Option<AttackOutcome>)> = None;
    for (epoch, snap) in outcome.snapshots.iter().enumerate() {
        let standard = reference.attack(snap, None, &cfg.attack)?;
        let adjusted = cda.map(|t| reference.attack(snap, Some(t), &cfg.attack)).transpose()?;
        record.leakage.push(EpochLeakage {
            epoch,
            standard: standard.summary.clone(),
            cda_adjusted: adjusted.as_ref().map(|a| a.summary.clone()),
        });
        last = Some((standard, adjusted));
    }
    let (end, end_cda) = last.expect("at least one epoch");
    record.end_attack = Some(end.summary.clone());
    record.end_attack_cda = end_cda.as_ref().map(|a| a.summary.clone());

    let fin = outcome.final_snapshot();
    let stereo = stereoset_score(fin, &data::stereoset_tiny())?;
    if cfg.eval.bias {
        let mode = PermutationMode::Auto {
            samples: cfg.eval.permutation_samples,
            seed: derive_seed(ctx.seed, "permutation"),
        };
        let seat = seat_suite(fin, &data::seat_tests(), &data::seat_templates(), mode)?;
        let becpro = becpro_score(fin, &data::becpro_templates())?;
        record.bias = Some(BiasScorecard {
            seat,
            becpro: becpro.score,
            lms: stereo.lms,
            ss: stereo.ss,
        });
    }
    record.utility = Some(UtilityReport {
        perplexity: perplexity(fin, &ctx.split.dev)?,
        lms: stereo.lms,
    });

    if let Some(o) = out {
        let dir = o.arm_dir(arm.label, ctx.seed)?;
        write_jsonl(&dir.join("epochs.jsonl"), &outcome.metrics)?;
        write_trace(&dir.join("attack-trace.jsonl"), &end)?;
        if let Some(a) = &end_cda {
            write_trace(&dir.join("attack-trace-cda.jsonl"), a)?;
        }
        if o.checkpoints {
            for (k, snap) in outcome.snapshots.iter().enumerate() {
                snap.save(&dir.join(format!("checkpoint-epoch{k}.json")))?;
            }
        }
    }
    Ok(())
}

/// Persists the shared per-seed artifacts (vocabulary, split, base model).
pub fn save_seed_artifacts(ctx: &SeedContext, out: &OutputDir) -> Result<PathBuf, PipelineError> {
    let dir = out.root.join(format!("seed{}", ctx.seed));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    ctx.vocab.save(dir.join("vocab.txt"))?;
    let split_path = dir.join("split.json");
    fs::write(&split_path, serde_json::to_string(&ctx.split).expect("split serializes")).map_err(io_err(&split_path))?;
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&ctx.summary).expect("summary serializes"))
        .map_err(io_err(&summary_path))?;
    ctx.base.save(&dir.join("base.json"))?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixOutput {
    pub records: Vec<RunRecord>,
    pub seeds: Vec<SeedSummary>,
    pub report: MatrixReport,
}

pub fn run_matrix(cfg: &ExperimentConfig, arms: &[ArmLabel], seeds: &[u64]) -> MatrixOutput {
    run_matrix_with(cfg, arms, seeds, None)
}

/// One record per (arm, seed). A failing seed or arm yields incomplete
/// records; the rest of the matrix still runs.
pub fn run_matrix_with(
    cfg: &ExperimentConfig,
    arms: &[ArmLabel],
    seeds: &[u64],
    out: Option<&OutputDir>,
) -> MatrixOutput {
    let mut records = Vec::with_capacity(arms.len() * seeds.len());
    let mut summaries = Vec::new();
    for &seed in seeds {
        let mut fail_all = |e: PipelineError| {
            for &arm in arms {
                let r = RunRecord::new(cfg, arm, seed).finish(Err(PipelineError::SeedPreparation(e.to_string())));
                if let Some(o) = out {
                    if let Err(e) = o.append_record(&r) {
                        log::error!("cannot persist run record: {e}");
                    }
                }
                records.push(r);
            }
        };
        let ctx = match SeedContext::prepare(cfg, seed) {
            Ok(ctx) => ctx,
            Err(e) => {
                fail_all(e);
                continue;
            }
        };
        let saved = out.map(|o| save_seed_artifacts(&ctx, o)).transpose();
        let cache = saved.and_then(|_| {
            Ok(ReferenceCache::new(&ctx.base, &ctx.split.train, &ctx.split.dev, "pretrained base")?)
        });
        let cache = match cache {
            Ok(c) => c,
            Err(e) => {
                fail_all(e);
                continue;
            }
        };
        summaries.push(ctx.summary.clone());
        for &arm in arms {
            records.push(run_arm(&ctx, &cache, cfg, arm, out));
        }
    }
    let report = MatrixReport::from_records(&records);
    MatrixOutput {
        records,
        seeds: summaries,
        report,
    }
}
