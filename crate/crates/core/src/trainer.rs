//! Fine-tuning with plain or differentially private updates.
//!
//! Each logical batch is `batch_size * accumulation_steps` examples. Every
//! example contributes its own gradient (a microbatch of one). Under DP the
//! per-example gradients are clipped, summed, perturbed by a single Gaussian
//! draw and divided by the batch size before the optimizer sees them.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusSplit, TokenSequence, Vocabulary};
use crate::model::{l2_norm, GradientVector, LmSnapshot, ModelError, Provenance, TinyLm};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("post-clip gradient norm {norm} exceeds clip bound {clip}")]
    ClipViolation { norm: f64, clip: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const ACCOUNTANT_RDP: &str = "rdp-gaussian-no-amplification";
pub const ACCOUNTANT_NONE: &str = "none";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Epsilon {
    Finite(f64),
    /// No finite guarantee: DP disabled or zero noise.
    Unbounded,
}

impl Epsilon {
    pub fn value(self) -> f64 {
        match self {
            Epsilon::Finite(e) => e,
            Epsilon::Unbounded => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, Epsilon::Finite(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DPConfig {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Logical batch over dataset size; filled in by [`train`].
    pub sampling_rate: f64,
    pub delta: f64,
}

impl Default for DPConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sampling_rate: 1.0,
            delta: 1e-5,
        }
    }
}

impl DPConfig {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !self.enabled {
            return Ok(());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        if !(self.noise_multiplier >= 0.0) {
            return bad("noise multiplier must be non-negative");
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad("sampling rate must lie in (0, 1]");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub optimizer: OptimizerKind,
    pub dropout: f64,
    pub seed: u64,
    /// Fail the run if any clipped gradient exceeds the bound.
    #[serde(default)]
    pub audit_clipping: bool,
}

impl TrainConfig {
    /// Three epochs at lr 1e-5 with batch 2; accumulation 128 for private
    /// runs and 8 otherwise.
    pub fn reference(dp: bool) -> Self {
        Self {
            epochs: 3,
            learning_rate: 1e-5,
            batch_size: 2,
            accumulation_steps: if dp { 128 } else { 8 },
            optimizer: OptimizerKind::Adam,
            dropout: crate::model::DEFAULT_DROPOUT,
            seed: 0,
            audit_clipping: false,
        }
    }

    pub fn logical_batch(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.logical_batch())
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(TrainError::InvalidConfig(
                "epochs, batch size and accumulation steps must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::InvalidConfig("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Scales `g` to norm at most `c`. The result never exceeds `c`, even
/// after rounding.
pub fn clip(g: &GradientVector, c: f64) -> GradientVector {
    let norm = g.norm();
    if norm <= c {
        return g.clone();
    }
    let mut factor = c / norm;
    loop {
        let out = g.scaled(factor);
        if out.norm() <= c {
            return out;
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

/// `len` independent draws from N(0, (sigma * c)^2).
pub fn gaussian_noise<R: rand::Rng>(len: usize, sigma: f64, c: f64, rng: &mut R) -> Vec<f64> {
    let std = sigma * c;
    if std == 0.0 {
        return vec![0.0; len];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Renyi orders searched by the accountant: 1.5 to 256 in steps of 0.5,
/// then doubling up to 2^20 so that very large noise gets a tight bound.
pub fn rdp_orders() -> impl Iterator<Item = f64> {
    (3..=512)
        .map(|k| k as f64 * 0.5)
        .chain((9..=20).map(|p| 2f64.powi(p)))
}

/// Gaussian-mechanism RDP composed over `steps` releases, converted to
/// (epsilon, delta). Subsampling amplification is ignored, so the bound is
/// loose but valid for any sampling scheme.
pub fn epsilon_of(dp: &DPConfig, steps: usize) -> Epsilon {
    if !dp.enabled || dp.noise_multiplier == 0.0 || steps == 0 {
        return Epsilon::Unbounded;
    }
    let s2 = dp.noise_multiplier * dp.noise_multiplier;
    let t = steps as f64;
    let log_delta = (1.0 / dp.delta).ln();
    Epsilon::Finite(
        rdp_orders()
            .map(|a| t * a / (2.0 * s2) + log_delta / (a - 1.0))
            .fold(f64::INFINITY, f64::min),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: usize,
    pub delta: f64,
    pub epsilon: Epsilon,
    pub accountant: String,
    pub note: String,
}

impl PrivacyReport {
    pub fn new(dp: &DPConfig, steps: usize) -> Self {
        let (accountant, note) = if dp.enabled {
            (
                ACCOUNTANT_RDP,
                "batches come from a seeded shuffle rather than Poisson sampling; q is reported \
                 for reference only and the bound does not use it",
            )
        } else {
            (ACCOUNTANT_NONE, "non-private training")
        };
        Self {
            clip_norm: dp.clip_norm,
            noise_multiplier: dp.noise_multiplier,
            sampling_rate: dp.sampling_rate,
            steps,
            delta: dp.delta,
            epsilon: epsilon_of(dp, steps),
            accountant: accountant.into(),
            note: note.into(),
        }
    }
}

/// Plain SGD or Adam over the trainable parameters.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let slots = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Self {
            kind,
            lr,
            m: vec![0.0; slots],
            v: vec![0.0; slots],
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut TinyLm, grad: &[f64]) {
        self.t += 1;
        let delta: Vec<f64> = match self.kind {
            OptimizerKind::Sgd => grad.iter().map(|g| -self.lr * g).collect(),
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_B1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_B2.powi(self.t as i32);
                grad.iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(&g, (m, v))| {
                        *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
                        *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
                        -self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
                    })
                    .collect()
            }
        };
        model.add_to_trainable(&delta);
    }
}

const DROPOUT_SALT: u64 = 0x6472_6f70;
const NOISE_SALT: u64 = 0x6e6f_6973;
const SHUFFLE_SALT: u64 = 0x7368_7566;

/// Randomness for one training run: per-example dropout streams addressed
/// by a global example counter, and one sequential noise stream.
pub struct StepRng {
    seed: u64,
    noise: ChaCha8Rng,
}

impl StepRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            noise: ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT),
        }
    }

    fn dropout(&self, example: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ DROPOUT_SALT);
        r.set_stream(example);
        r
    }

    fn shuffle(&self, epoch: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed ^ SHUFFLE_SALT);
        r.set_stream(epoch as u64);
        r
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub loss_sum: f64,
    pub examples: usize,
    pub max_clipped_norm: f64,
}

/// One logical batch: per-example gradients (dropout streams start at
/// `first_example`), optional clipping and noise, then an optimizer step.
pub fn dp_step(
    model: &mut TinyLm,
    optimizer: &mut Optimizer,
    batch: &[&TokenSequence],
    dp: &DPConfig,
    rng: &mut StepRng,
    first_example: u64,
) -> Result<StepStats, TrainError> {
    let frozen: &TinyLm = model;
    let rng_ref = &*rng;
    let per_example: Vec<(f64, GradientVector)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let mut r = rng_ref.dropout(first_example + i as u64);
            frozen.loss_and_gradient(seq, Some(&mut r))
        })
        .collect::<Result<_, _>>()?;

    let n = model.trainable_count();
    let mut sum = vec![0.0; n];
    let mut stats = StepStats {
        examples: batch.len(),
        ..StepStats::default()
    };
    for (loss, g) in &per_example {
        stats.loss_sum += loss;
        let g = if dp.enabled {
            let c = clip(g, dp.clip_norm);
            stats.max_clipped_norm = stats.max_clipped_norm.max(l2_norm(c.values()));
            c
        } else {
            g.clone()
        };
        for (s, v) in sum.iter_mut().zip(g.values()) {
            *s += v;
        }
    }
    if dp.enabled {
        let noise = gaussian_noise(n, dp.noise_multiplier, dp.clip_norm, &mut rng.noise);
        for (s, z) in sum.iter_mut().zip(noise) {
            *s += z;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    sum.iter_mut().for_each(|s| *s *= inv);
    optimizer.step(model, &sum);
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    /// Cumulative optimizer steps.
    pub steps: usize,
    pub epsilon: Epsilon,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_clipped_norm: Option<f64>,
}

pub struct TrainOutcome {
    /// One snapshot per epoch, in order; the last is the final model.
    pub snapshots: Vec<LmSnapshot>,
    pub privacy: PrivacyReport,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn final_snapshot(&self) -> &LmSnapshot {
        self.snapshots.last().expect("at least one epoch")
    }
}

/// Mean eval-mode loss over `seqs`.
pub fn mean_loss(model: &TinyLm, seqs: &[TokenSequence]) -> Result<f64, ModelError> {
    let losses: Vec<f64> = seqs.par_iter().map(|s| model.loss(s)).collect::<Result<_, _>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains `model` on `split.train`, snapshotting after every epoch.
pub fn train(
    model: TinyLm,
    vocab: Arc<Vocabulary>,
    split: &CorpusSplit,
    tc: &TrainConfig,
    dp: &DPConfig,
    label: &str,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    let n = split.train.len();
    if n == 0 {
        return Err(TrainError::EmptyTrainSplit);
    }
    let mut dp = dp.clone();
    dp.sampling_rate = (tc.logical_batch() as f64 / n as f64).min(1.0);
    dp.validate()?;
    if dp.enabled && dp.delta >= 1.0 / n as f64 {
        log::warn!("delta {} is not below 1/N = {}", dp.delta, 1.0 / n as f64);
    }

    let mut model = model.with_dropout(tc.dropout)?;
    let mut optimizer = Optimizer::new(tc.optimizer, tc.learning_rate, model.trainable_count());
    let mut rng = StepRng::new(tc.seed);
    let logical = tc.logical_batch();
    let mut steps = 0;
    let mut snapshots = Vec::with_capacity(tc.epochs);
    let mut metrics = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng.shuffle(epoch));
        let mut loss_sum = 0.0;
        let mut max_norm = 0.0f64;
        for (b, idx) in order.chunks(logical).enumerate() {
            let batch: Vec<&TokenSequence> = idx.iter().map(|&i| &split.train[i]).collect();
            let first = (epoch * n + b * logical) as u64;
            let stats = dp_step(&mut model, &mut optimizer, &batch, &dp, &mut rng, first)?;
            if tc.audit_clipping && stats.max_clipped_norm > dp.clip_norm {
                return Err(TrainError::ClipViolation {
                    norm: stats.max_clipped_norm,
                    clip: dp.clip_norm,
                });
            }
            loss_sum += stats.loss_sum;
            max_norm = max_norm.max(stats.max_clipped_norm);
            steps += 1;
        }
        let dev_loss = if split.dev.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &split.dev)?)
        };
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / n as f64,
            dev_loss,
            steps,
            epsilon: epsilon_of(&dp, steps),
            max_clipped_norm: dp.enabled.then_some(max_norm),
        };
        log::info!(
            "{label} epoch {epoch}: train {:.4} dev {:?} steps {steps}",
            m.train_loss,
            m.dev_loss
        );
        metrics.push(m);
        let provenance = Provenance {
            arm: label.to_string(),
            epochs: epoch + 1,
            steps,
            note: String::new(),
        };
        snapshots.push(LmSnapshot::new(model.clone(), vocab.clone(), provenance)?);
    }

    Ok(TrainOutcome {
        snapshots,
        privacy: PrivacyReport::new(&dp, steps),
        metrics,
    })
}
