//! A small GPT-style decoder with low-rank adapters on the attention query
//! and value projections.
//!
//! Everything runs in `f64`. Parameters live in one flat buffer described by
//! a [`Layout`]; the trainable subset is chosen by [`TrainScope`].
//! Adapted projections compute `W0 x + B (A x)` with `B` zero-initialized,
//! so a fresh adapter leaves the base model's outputs untouched.

mod checkpoint;
mod forward;
mod layout;

use std::ops::Range;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, Vocabulary, PAD_ID};

pub use checkpoint::{CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use layout::{BlockIds, Layout, TensorKind, TensorSpec, TrainScope};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("sequence has no non-pad positions to score")]
    NoTargets,
    #[error("vocabulary has {vocab} tokens but the model expects {model}")]
    VocabularyMismatch { vocab: usize, model: usize },
    #[error("parameter vector has length {got}, expected {expected}")]
    ParameterLength { got: usize, expected: usize },
}

/// Default dropout probability of the unmodified model.
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Elevated dropout used as a debiasing treatment.
pub const DEBIAS_DROPOUT: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub lora_rank: usize,
    pub init_std: f64,
    pub seed: u64,
    #[serde(default)]
    pub scope: TrainScope,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size < 4 {
            return bad(format!("vocab size {} too small", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.context_len == 0 {
            return bad("n_layers and context_len must be positive".into());
        }
        if self.lora_rank == 0 || self.lora_rank > self.d_model {
            return bad(format!(
                "lora rank {} must lie in [1, {}]",
                self.lora_rank, self.d_model
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        if !(self.init_std > 0.0) {
            return bad("init_std must be positive".into());
        }
        Ok(())
    }
}

/// Flat gradient over the trainable parameters with its l2 norm cached.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
    norm: f64,
}

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Self {
        let norm = l2_norm(&values);
        Self { values, norm }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            norm: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multiplies every entry by `factor` and recomputes the norm.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.values.iter().map(|v| v * factor).collect())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Log-likelihood of the scored positions of a sequence, in nats.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub total: f64,
    pub tokens: usize,
    pub mean: f64,
}

impl SequenceScore {
    fn from_total(total: f64, tokens: usize) -> Self {
        Self {
            total,
            tokens,
            mean: total / tokens as f64,
        }
    }
}

/// Logits for each position plus the final-layer hidden states.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    pub hidden: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TinyLm {
    config: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
    trainable: Vec<Range<usize>>,
}

fn log_softmax_at(row: ndarray::ArrayView1<f64>, target: usize) -> f64 {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    row[target] - lse
}

impl TinyLm {
    /// Seeded random initialization.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; layout.total];
        let std = config.init_std;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let base = Normal::new(0.0, std).expect("positive std");
        let resid = Normal::new(0.0, resid_std).expect("positive std");
        let lora_a = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("positive std");
        for spec in &layout.tensors {
            let slot = &mut params[spec.range()];
            let name = spec.name.as_str();
            if name.ends_with(".g") {
                slot.fill(1.0);
            } else if spec.kind == TensorKind::LoraB || spec.rows == 1 {
                // Biases, LN shifts and B adapters start at zero.
            } else if spec.kind == TensorKind::LoraA {
                slot.iter_mut().for_each(|v| *v = lora_a.sample(&mut rng));
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                slot.iter_mut().for_each(|v| *v = resid.sample(&mut rng));
            } else {
                slot.iter_mut().for_each(|v| *v = base.sample(&mut rng));
            }
        }
        Ok(Self::from_parts(config, params).expect("layout-sized params"))
    }

    pub fn from_parts(config: ModelConfig, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::ParameterLength {
                got: params.len(),
                expected: layout.total,
            });
        }
        let trainable = layout.trainable_ranges(config.scope);
        Ok(Self {
            config,
            layout,
            params,
            trainable,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Same weights, different trainable subset.
    pub fn with_scope(mut self, scope: TrainScope) -> Self {
        self.config.scope = scope;
        self.trainable = self.layout.trainable_ranges(scope);
        self
    }

    /// Same weights, different dropout probability.
    pub fn with_dropout(mut self, dropout: f64) -> Result<Self, ModelError> {
        self.config.dropout = dropout;
        self.config.validate()?;
        Ok(self)
    }

    /// Writes one tensor by name; used to set up controlled test models.
    pub fn set_tensor(&mut self, name: &str, values: &[f64]) -> Result<(), ModelError> {
        let spec = self
            .layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ModelError::InvalidConfig(format!("no tensor named {name}")))?;
        if values.len() != spec.len() {
            return Err(ModelError::ParameterLength {
                got: values.len(),
                expected: spec.len(),
            });
        }
        self.params[spec.range()].copy_from_slice(values);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.iter().map(|r| r.len()).sum()
    }

    pub fn trainable_params(&self) -> Vec<f64> {
        self.trainable
            .iter()
            .flat_map(|r| self.params[r.clone()].iter().copied())
            .collect()
    }

    pub fn set_trainable_params(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.trainable_count() {
            return Err(ModelError::ParameterLength {
                got: values.len(),
                expected: self.trainable_count(),
            });
        }
        let mut at = 0;
        for r in &self.trainable {
            let n = r.len();
            self.params[r.clone()].copy_from_slice(&values[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Adds `delta` (one entry per trainable parameter) in place.
    pub fn add_to_trainable(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.trainable_count());
        let mut at = 0;
        for r in &self.trainable {
            for (p, d) in self.params[r.clone()].iter_mut().zip(&delta[at..at + r.len()]) {
                *p += d;
            }
            at += r.len();
        }
    }

    fn gather_trainable(&self, full: &[f64]) -> Vec<f64> {
        self.trainable
            .iter()
            .flat_map(|r| full[r.clone()].iter().copied())
            .collect()
    }

    fn check(&self, ids: &[u32]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if ids.len() > self.config.context_len {
            return Err(ModelError::SequenceTooLong {
                len: ids.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass (no dropout).
    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput, ModelError> {
        self.check(seq.ids())?;
        let c = self.forward_cached::<ChaCha8Rng>(seq.ids(), None);
        Ok(ForwardOutput {
            logits: c.logits,
            hidden: c.hidden,
        })
    }

    /// Forward pass with dropout drawn from `rng`.
    pub fn forward_train<R: Rng>(&self, seq: &TokenSequence, rng: &mut R) -> Result<ForwardOutput, ModelError> {
        self.check(seq.ids())?;
        let c = self.forward_cached(seq.ids(), Some(rng));
        Ok(ForwardOutput {
            logits: c.logits,
            hidden: c.hidden,
        })
    }

    /// Trailing pads never influence earlier positions, so they are cut
    /// before running the network.
    fn scored_prefix<'a>(&self, seq: &'a TokenSequence) -> Result<&'a [u32], ModelError> {
        let ids = &seq.ids()[..seq.trimmed_len()];
        if ids.len() < 2 {
            return Err(ModelError::NoTargets);
        }
        self.check(ids)?;
        Ok(ids)
    }

    /// Sum of next-token log-probabilities for targets at positions
    /// `from..` (position 0 is never a target). Pad targets are skipped.
    pub fn span_log_likelihood(&self, seq: &TokenSequence, from: usize) -> Result<SequenceScore, ModelError> {
        let ids = self.scored_prefix(seq)?;
        let c = self.forward_cached::<ChaCha8Rng>(ids, None);
        let mut total = 0.0;
        let mut n = 0;
        for pos in from.max(1)..ids.len() {
            let target = ids[pos];
            if target == PAD_ID {
                continue;
            }
            total += log_softmax_at(c.logits.row(pos - 1), target as usize);
            n += 1;
        }
        if n == 0 {
            return Err(ModelError::NoTargets);
        }
        Ok(SequenceScore::from_total(total, n))
    }

    pub fn sequence_log_likelihood(&self, seq: &TokenSequence) -> Result<SequenceScore, ModelError> {
        self.span_log_likelihood(seq, 1)
    }

    /// Mean next-token cross-entropy over non-pad targets.
    pub fn loss(&self, seq: &TokenSequence) -> Result<f64, ModelError> {
        Ok(-self.sequence_log_likelihood(seq)?.mean)
    }

    /// Loss and gradient over the trainable parameters. Dropout is applied
    /// when `rng` is given.
    pub fn loss_and_gradient<R: Rng>(
        &self,
        seq: &TokenSequence,
        rng: Option<&mut R>,
    ) -> Result<(f64, GradientVector), ModelError> {
        let ids = self.scored_prefix(seq)?;
        let c = self.forward_cached(ids, rng);
        let (t, v) = c.logits.dim();
        let n = ids[1..].iter().filter(|&&id| id != PAD_ID).count();
        if n == 0 {
            return Err(ModelError::NoTargets);
        }
        let mut dlogits = Array2::zeros((t, v));
        let mut total = 0.0;
        for pos in 0..t - 1 {
            let target = ids[pos + 1];
            if target == PAD_ID {
                continue;
            }
            let row = c.logits.row(pos);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            total += row[target as usize] - m - z.ln();
            let mut drow = dlogits.row_mut(pos);
            for j in 0..v {
                drow[j] = (row[j] - m).exp() / z / n as f64;
            }
            drow[target as usize] -= 1.0 / n as f64;
        }
        let grads = self.backward(&c, &dlogits);
        Ok((-total / n as f64, GradientVector::new(self.gather_trainable(&grads))))
    }

    /// Deterministic (dropout-off) gradient of the loss of one example.
    pub fn per_example_gradient(&self, seq: &TokenSequence) -> Result<GradientVector, ModelError> {
        Ok(self.loss_and_gradient::<ChaCha8Rng>(seq, None)?.1)
    }

    /// Mean of the final hidden states over non-pad positions.
    pub fn sentence_embedding(&self, seq: &TokenSequence) -> Result<Vec<f64>, ModelError> {
        let ids = &seq.ids()[..seq.trimmed_len()];
        if ids.is_empty() {
            return Err(ModelError::NoTargets);
        }
        self.check(ids)?;
        let c = self.forward_cached::<ChaCha8Rng>(ids, None);
        let d = self.config.d_model;
        let mut acc = vec![0.0; d];
        let mut n = 0usize;
        for (i, &id) in ids.iter().enumerate() {
            if id == PAD_ID {
                continue;
            }
            for (a, h) in acc.iter_mut().zip(c.hidden.row(i)) {
                *a += h;
            }
            n += 1;
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Ok(acc)
    }
}

/// Where a snapshot came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub arm: String,
    pub epochs: usize,
    pub steps: usize,
    pub note: String,
}

/// An immutable trained model bound to its vocabulary.
#[derive(Clone, Debug)]
pub struct LmSnapshot {
    model: Arc<TinyLm>,
    vocab: Arc<Vocabulary>,
    provenance: Provenance,
}

impl LmSnapshot {
    pub fn new(model: TinyLm, vocab: Arc<Vocabulary>, provenance: Provenance) -> Result<Self, ModelError> {
        if vocab.len() != model.config().vocab_size {
            return Err(ModelError::VocabularyMismatch {
                vocab: vocab.len(),
                model: model.config().vocab_size,
            });
        }
        Ok(Self {
            model: Arc::new(model),
            vocab,
            provenance,
        })
    }

    pub fn model(&self) -> &TinyLm {
        &self.model
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// A mutable copy of the weights, for further training.
    pub fn to_model(&self) -> TinyLm {
        (*self.model).clone()
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput, ModelError> {
        self.model.forward(seq)
    }

    pub fn loss(&self, seq: &TokenSequence) -> Result<f64, ModelError> {
        self.model.loss(seq)
    }

    pub fn per_example_gradient(&self, seq: &TokenSequence) -> Result<GradientVector, ModelError> {
        self.model.per_example_gradient(seq)
    }

    pub fn sequence_log_likelihood(&self, seq: &TokenSequence) -> Result<SequenceScore, ModelError> {
        self.model.sequence_log_likelihood(seq)
    }

    pub fn span_log_likelihood(&self, seq: &TokenSequence, from: usize) -> Result<SequenceScore, ModelError> {
        self.model.span_log_likelihood(seq, from)
    }

    pub fn sentence_embedding(&self, seq: &TokenSequence) -> Result<Vec<f64>, ModelError> {
        self.model.sentence_embedding(seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    pub(crate) fn small_config(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 16,
            dropout: 0.1,
            lora_rank: 2,
            init_std: 0.3,
            seed: 5,
            scope: TrainScope::Lora,
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec())
    }

    /// All logits zero: every next-token distribution is uniform.
    fn uniform(vocab: usize) -> TinyLm {
        let mut m = TinyLm::new(small_config(vocab)).unwrap();
        let n = m.tensor("head").unwrap().len();
        m.set_tensor("head", &vec![0.0; n]).unwrap();
        m
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config(10);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_config(10);
        c.lora_rank = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn uniform_model_loss_and_likelihood() {
        let m = uniform(10);
        let s = seq(&[3, 4, 5, 6, 7]);
        assert_relative_eq!(m.loss(&s).unwrap(), 10f64.ln(), epsilon = 1e-12);
        let score = m.sequence_log_likelihood(&s).unwrap();
        assert_eq!(score.tokens, 4);
        assert_relative_eq!(score.total, 4.0 * (0.1f64).ln(), epsilon = 1e-12);
        assert_relative_eq!(score.mean * 4.0, score.total, epsilon = 1e-12);
    }

    #[test]
    fn confident_model_has_zero_loss() {
        // A huge head weight on one hidden direction makes the target certain.
        let mut m = TinyLm::new(small_config(6)).unwrap();
        let s = seq(&[3, 4]);
        let hidden = m.forward(&s).unwrap().hidden;
        let h0: Vec<f64> = hidden.row(0).to_vec();
        let mut head = vec![0.0; 6 * 8];
        for j in 0..8 {
            head[4 * 8 + j] = 1e4 * h0[j];
        }
        m.set_tensor("head", &head).unwrap();
        assert!(m.loss(&s).unwrap() < 1e-12);
    }

    #[test]
    fn trailing_pads_do_not_change_scores() {
        let m = TinyLm::new(small_config(12)).unwrap();
        let a = m.sequence_log_likelihood(&seq(&[3, 5, 7, 9])).unwrap();
        let b = m.sequence_log_likelihood(&seq(&[3, 5, 7, 9, 0, 0, 0])).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            m.sequence_log_likelihood(&seq(&[0, 0, 0])),
            Err(ModelError::NoTargets)
        );
        assert_eq!(m.loss(&seq(&[0, 0])), Err(ModelError::NoTargets));
    }

    #[test]
    fn input_validation() {
        let m = TinyLm::new(small_config(12)).unwrap();
        assert!(matches!(
            m.forward(&seq(&[3; 17])),
            Err(ModelError::SequenceTooLong { len: 17, max: 16 })
        ));
        assert!(matches!(
            m.forward(&seq(&[3, 12])),
            Err(ModelError::TokenOutOfRange { id: 12, .. })
        ));
        assert_eq!(m.forward(&seq(&[])).unwrap_err(), ModelError::EmptySequence);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = TinyLm::new(small_config(20)).unwrap();
        let out = m.forward(&seq(&[3, 9, 4, 17, 2, 8])).unwrap();
        for row in out.logits.rows() {
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let total: f64 = row.iter().map(|x| (x - mx).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn causal_masking_is_exact() {
        let m = TinyLm::new(small_config(20)).unwrap();
        let a = m.forward(&seq(&[3, 9, 4, 17, 2, 8])).unwrap().logits;
        let b = m.forward(&seq(&[3, 9, 4, 5, 19, 11])).unwrap().logits;
        for i in 0..3 {
            assert_eq!(a.row(i), b.row(i));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn eval_forward_is_repeatable_and_train_forward_is_stochastic() {
        let m = TinyLm::new(small_config(20)).unwrap();
        let s = seq(&[3, 9, 4, 17]);
        assert_eq!(m.forward(&s).unwrap().logits, m.forward(&s).unwrap().logits);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let a = m.forward_train(&s, &mut r1).unwrap().logits;
        let b = m.forward_train(&s, &mut r2).unwrap().logits;
        assert_ne!(a, b);
    }

    #[test]
    fn lora_param_count_and_frozen_weights() {
        let m = TinyLm::new(small_config(20)).unwrap();
        // 2 layers x 2 adapted matrices x r (d_in + d_out)
        assert_eq!(m.trainable_count(), 2 * 2 * 2 * (8 + 8));
        let full = m.clone().with_scope(TrainScope::Full);
        let lora_total: usize = m
            .layout()
            .tensors
            .iter()
            .filter(|t| t.kind != TensorKind::Base)
            .map(TensorSpec::len)
            .sum();
        assert_eq!(full.trainable_count(), m.layout().total - lora_total);
    }

    #[test]
    fn zero_b_adapter_matches_base() {
        let m = TinyLm::new(small_config(20)).unwrap();
        let mut stripped = m.clone();
        for name in ["h0.lora.q.a", "h0.lora.v.a", "h1.lora.q.a", "h1.lora.v.a"] {
            let n = stripped.tensor(name).unwrap().len();
            stripped.set_tensor(name, &vec![0.0; n]).unwrap();
        }
        let s = seq(&[3, 9, 4, 17, 2, 8]);
        assert_eq!(m.forward(&s).unwrap().logits, stripped.forward(&s).unwrap().logits);
    }

    #[test]
    fn gradient_is_deterministic() {
        let m = TinyLm::new(small_config(20)).unwrap().with_scope(TrainScope::Full);
        let s = seq(&[3, 9, 4, 17, 2, 8]);
        assert_eq!(
            m.per_example_gradient(&s).unwrap(),
            m.per_example_gradient(&s).unwrap()
        );
        assert_eq!(m.per_example_gradient(&s).unwrap().len(), m.trainable_count());
    }

    #[test]
    fn embedding_shape_and_single_token() {
        let m = TinyLm::new(small_config(20)).unwrap();
        let e = m.sentence_embedding(&seq(&[5])).unwrap();
        assert_eq!(e.len(), 8);
        let h = m.forward(&seq(&[5])).unwrap().hidden;
        assert_eq!(e, h.row(0).to_vec());
        let e2 = m.sentence_embedding(&seq(&[5, 6, 0, 0])).unwrap();
        assert_eq!(e2.len(), 8);
        assert_eq!(e2, m.sentence_embedding(&seq(&[5, 6])).unwrap());
    }

    #[test]
    fn gradient_norm_cache() {
        let g = GradientVector::new(vec![3.0, 4.0]);
        assert_eq!(g.norm(), 5.0);
        assert_relative_eq!(g.scaled(0.5).norm(), 2.5);
    }
}
