//! Held-out perplexity. Each chunk is scored on its own; contexts never
//! cross chunk boundaries.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenSequence;
use crate::model::{LmSnapshot, ModelError};

pub use crate::bias::{stereoset_score, StereoResult};

#[derive(Debug, Error, PartialEq)]
pub enum UtilityError {
    #[error("no scorable tokens in the evaluation set")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub perplexity: f64,
    pub tokens: usize,
    pub log_likelihood: f64,
}

/// Token-weighted perplexity over all non-pad next-token targets.
/// Sequences without targets (for example all padding) are skipped.
pub fn perplexity(snapshot: &LmSnapshot, seqs: &[TokenSequence]) -> Result<PerplexityResult, UtilityError> {
    let scores: Vec<Option<(f64, usize)>> = seqs
        .par_iter()
        .map(|s| match snapshot.sequence_log_likelihood(s) {
            Ok(score) => Ok(Some((score.total, score.tokens))),
            Err(ModelError::NoTargets) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    let (mut total, mut tokens) = (0.0, 0usize);
    for (ll, n) in scores.into_iter().flatten() {
        total += ll;
        tokens += n;
    }
    if tokens == 0 {
        return Err(UtilityError::Empty);
    }
    Ok(PerplexityResult {
        perplexity: (-total / tokens as f64).exp(),
        tokens,
        log_likelihood: total,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub perplexity: PerplexityResult,
    pub lms: f64,
}
