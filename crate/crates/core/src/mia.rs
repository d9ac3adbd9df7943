//! Reference-model likelihood-ratio membership inference.
//!
//! For a sample `x`, `log LR(x) = log Pr_ref(x) - log Pr_target(x)`, using
//! total sequence log-likelihoods. A sample is predicted to be a member
//! when `log LR < t`, where `t` is the largest observed non-member value
//! whose false-positive rate stays within `alpha`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cda::CompiledTable;
use crate::corpus::TokenSequence;
use crate::model::{LmSnapshot, ModelError};

#[derive(Debug, Error)]
pub enum MiaError {
    #[error("target and reference use different vocabularies")]
    VocabularyMismatch,
    #[error("no non-member samples to calibrate against")]
    EmptyNonMembers,
    #[error("alpha {0} must lie in (0, 1)")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing attack trace: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub alpha: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { alpha: 0.10 }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), MiaError> {
        if self.alpha > 0.0 && self.alpha < 1.0 {
            Ok(())
        } else {
            Err(MiaError::InvalidAlpha(self.alpha))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSplit {
    Member,
    NonMember,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub logpm: f64,
    pub logpr: f64,
    pub loglr: f64,
}

impl SampleScore {
    pub fn new(logpm: f64, logpr: f64) -> Self {
        Self {
            logpm,
            logpr,
            loglr: logpr - logpm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub split: SampleSplit,
    pub logpm: f64,
    pub logpr: f64,
    pub loglr: f64,
    pub member_pred: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackVariant {
    Standard,
    /// Target likelihoods are taken on the augmented form of each sample.
    CdaAdjusted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub variant: AttackVariant,
    pub threshold: f64,
    pub alpha: f64,
    pub fpr: f64,
    pub recall: f64,
    pub members: usize,
    pub nonmembers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub summary: AttackSummary,
    pub records: Vec<SampleRecord>,
    /// Description of the reference model.
    pub reference: String,
}

#[derive(Serialize)]
struct TraceSummary<'a> {
    t: f64,
    alpha: f64,
    fpr: f64,
    recall: f64,
    variant: AttackVariant,
    reference: &'a str,
}

impl AttackOutcome {
    pub fn recall(&self) -> f64 {
        self.summary.recall
    }

    pub fn fpr(&self) -> f64 {
        self.summary.fpr
    }

    /// One JSON line per sample followed by a summary line.
    pub fn write_trace<W: Write>(&self, mut w: W) -> Result<(), MiaError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
            writeln!(w)?;
        }
        let s = TraceSummary {
            t: self.summary.threshold,
            alpha: self.summary.alpha,
            fpr: self.summary.fpr,
            recall: self.summary.recall,
            variant: self.summary.variant,
            reference: &self.reference,
        };
        serde_json::to_writer(&mut w, &s).map_err(std::io::Error::other)?;
        writeln!(w)?;
        Ok(())
    }
}

/// Total log-likelihood of each sample, optionally after a token mapping.
pub fn log_likelihoods(
    snapshot: &LmSnapshot,
    samples: &[TokenSequence],
    transform: Option<&CompiledTable>,
) -> Result<Vec<f64>, MiaError> {
    samples
        .par_iter()
        .map(|s| {
            let score = match transform {
                Some(t) => snapshot.sequence_log_likelihood(&t.apply(s)),
                None => snapshot.sequence_log_likelihood(s),
            };
            Ok(score?.total)
        })
        .collect()
}

fn check_vocab(target: &LmSnapshot, reference: &LmSnapshot) -> Result<(), MiaError> {
    if target.vocab().hash() != reference.vocab().hash() {
        return Err(MiaError::VocabularyMismatch);
    }
    Ok(())
}

pub fn score_samples(
    target: &LmSnapshot,
    reference: &LmSnapshot,
    samples: &[TokenSequence],
) -> Result<Vec<SampleScore>, MiaError> {
    check_vocab(target, reference)?;
    let pm = log_likelihoods(target, samples, None)?;
    let pr = log_likelihoods(reference, samples, None)?;
    Ok(pm.into_iter().zip(pr).map(|(m, r)| SampleScore::new(m, r)).collect())
}

/// Largest observed non-member value `t` with
/// `#{lr < t} / n <= alpha`.
pub fn calibrate_threshold(nonmember_lrs: &[f64], alpha: f64) -> Result<f64, MiaError> {
    if nonmember_lrs.is_empty() {
        return Err(MiaError::EmptyNonMembers);
    }
    let mut sorted = nonmember_lrs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    // sorted[i] has exactly `first index of its value` entries below it.
    let mut best = sorted[0];
    let mut below = 0usize;
    for (i, &v) in sorted.iter().enumerate() {
        if i > 0 && sorted[i - 1] < v {
            below = i;
        }
        if below as f64 / n <= alpha {
            best = v;
        } else {
            break;
        }
    }
    Ok(best)
}

/// Thresholds precomputed scores and builds the full outcome.
pub fn attack_from_scores(
    members: &[SampleScore],
    nonmembers: &[SampleScore],
    cfg: &AttackConfig,
    variant: AttackVariant,
    reference: &str,
) -> Result<AttackOutcome, MiaError> {
    cfg.validate()?;
    let lrs: Vec<f64> = nonmembers.iter().map(|s| s.loglr).collect();
    let t = calibrate_threshold(&lrs, cfg.alpha)?;
    let record = |(id, s): (usize, &SampleScore), split| SampleRecord {
        id,
        split,
        logpm: s.logpm,
        logpr: s.logpr,
        loglr: s.loglr,
        member_pred: s.loglr < t,
    };
    let mut records: Vec<SampleRecord> = members
        .iter()
        .enumerate()
        .map(|x| record(x, SampleSplit::Member))
        .collect();
    records.extend(nonmembers.iter().enumerate().map(|x| record(x, SampleSplit::NonMember)));
    let hits = |split| records.iter().filter(|r| r.split == split && r.member_pred).count();
    let recall = if members.is_empty() {
        0.0
    } else {
        hits(SampleSplit::Member) as f64 / members.len() as f64
    };
    let fpr = hits(SampleSplit::NonMember) as f64 / nonmembers.len() as f64;
    Ok(AttackOutcome {
        summary: AttackSummary {
            variant,
            threshold: t,
            alpha: cfg.alpha,
            fpr,
            recall,
            members: members.len(),
            nonmembers: nonmembers.len(),
        },
        records,
        reference: reference.to_string(),
    })
}

/// Reference-model likelihoods for a fixed member/non-member split,
/// computed once and reused across target snapshots.
pub struct ReferenceCache<'a> {
    reference: &'a LmSnapshot,
    members: &'a [TokenSequence],
    nonmembers: &'a [TokenSequence],
    member_lr: Vec<f64>,
    nonmember_lr: Vec<f64>,
    label: String,
}

impl<'a> ReferenceCache<'a> {
    pub fn new(
        reference: &'a LmSnapshot,
        members: &'a [TokenSequence],
        nonmembers: &'a [TokenSequence],
        label: &str,
    ) -> Result<Self, MiaError> {
        Ok(Self {
            member_lr: log_likelihoods(reference, members, None)?,
            nonmember_lr: log_likelihoods(reference, nonmembers, None)?,
            reference,
            members,
            nonmembers,
            label: label.to_string(),
        })
    }

    /// Attacks `target`. With `cda` set, the target scores the augmented
    /// form of every sample (members and non-members alike) while the
    /// reference keeps scoring the original.
    pub fn attack(
        &self,
        target: &LmSnapshot,
        cda: Option<&CompiledTable>,
        cfg: &AttackConfig,
    ) -> Result<AttackOutcome, MiaError> {
        check_vocab(target, self.reference)?;
        let score = |seqs, refs: &[f64]| -> Result<Vec<SampleScore>, MiaError> {
            let pm = log_likelihoods(target, seqs, cda)?;
            Ok(pm.into_iter().zip(refs).map(|(m, &r)| SampleScore::new(m, r)).collect())
        };
        let m = score(self.members, &self.member_lr)?;
        let n = score(self.nonmembers, &self.nonmember_lr)?;
        let variant = if cda.is_some() {
            AttackVariant::CdaAdjusted
        } else {
            AttackVariant::Standard
        };
        attack_from_scores(&m, &n, cfg, variant, &self.label)
    }
}

pub fn run_attack(
    target: &LmSnapshot,
    reference: &LmSnapshot,
    members: &[TokenSequence],
    nonmembers: &[TokenSequence],
    cfg: &AttackConfig,
) -> Result<AttackOutcome, MiaError> {
    ReferenceCache::new(reference, members, nonmembers, "reference")?.attack(target, None, cfg)
}

pub fn run_attack_cda(
    target: &LmSnapshot,
    reference: &LmSnapshot,
    members: &[TokenSequence],
    nonmembers: &[TokenSequence],
    table: &CompiledTable,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, MiaError> {
    ReferenceCache::new(reference, members, nonmembers, "reference")?.attack(target, Some(table), cfg)
}
