//! Gender-bias probes: embedding association tests over templated
//! sentences, paired-sentence likelihood comparisons, and stereotype
//! preference scores.
//!
//! All strict comparisons count ties as half a win, so a model that cannot
//! tell the two sides apart scores exactly 50.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{fill_template, TokenSequence, BOS_ID};
use crate::data::{PairTemplateSet, StereoItem, StereoKind, WeatSpec};
use crate::model::{LmSnapshot, ModelError};

#[derive(Debug, Error, PartialEq)]
pub enum BiasError {
    #[error("set {0} is empty")]
    EmptySet(String),
    #[error("embedding dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("effect size undefined: associations have zero spread (statistic {statistic})")]
    UndefinedEffectSize { statistic: f64, p_value: f64 },
    #[error("template {0:?} lacks a placeholder")]
    MissingPlaceholder(String),
    #[error("words outside the vocabulary: {0:?}")]
    OutOfVocabulary(Vec<String>),
    #[error("intrasentence item {0} has no BLANK marker")]
    MissingBlank(usize),
    #[error("no items to score")]
    EmptyInput,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const BLANK: &str = "BLANK";
pub const WORD_SLOT: &str = "<word>";
/// Above this many re-partitions the permutation test samples instead.
pub const EXHAUSTIVE_LIMIT: u64 = 20_000;
pub const DEFAULT_PERMUTATION_SAMPLES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PermutationMode {
    /// Exhaustive when small enough, otherwise sampled.
    Auto { samples: usize, seed: u64 },
    Exhaustive,
    Sampled { samples: usize, seed: u64 },
}

impl Default for PermutationMode {
    fn default() -> Self {
        PermutationMode::Auto {
            samples: DEFAULT_PERMUTATION_SAMPLES,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatResult {
    pub statistic: f64,
    /// Difference of mean associations over the population standard
    /// deviation of all associations in `A ∪ B`.
    pub effect_size: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub exhaustive: bool,
}

pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        0.0
    } else {
        dot / (nu * nv)
    }
}

fn association(t: &[f64], x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mean = |set: &[Vec<f64>]| set.iter().map(|v| cosine(t, v)).sum::<f64>() / set.len() as f64;
    mean(x) - mean(y)
}

/// Order-independent sum.
fn sorted_sum(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s.iter().sum()
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul((n - i) as u64) / (i as u64 + 1))
}

/// Calls `f` with the index set of every size-`k` subset of `0..n`.
fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize])) {
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx);
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Association test on precomputed vectors.
pub fn weat_vectors(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    mode: PermutationMode,
) -> Result<WeatResult, BiasError> {
    for (name, set) in [("A", a), ("B", b), ("X", x), ("Y", y)] {
        if set.is_empty() {
            return Err(BiasError::EmptySet(name.into()));
        }
    }
    let dim = a[0].len();
    if let Some(v) = [a, b, x, y].iter().flat_map(|s| s.iter()).find(|v| v.len() != dim) {
        return Err(BiasError::DimensionMismatch(dim, v.len()));
    }
    let sa: Vec<f64> = a.iter().map(|t| association(t, x, y)).collect();
    let sb: Vec<f64> = b.iter().map(|t| association(t, x, y)).collect();
    let statistic = sorted_sum(&sa) - sorted_sum(&sb);

    let pooled: Vec<f64> = sa.iter().chain(&sb).copied().collect();
    let n = pooled.len();
    let total = sorted_sum(&pooled);
    let tol = 1e-12 * (1.0 + statistic.abs());
    let stat_of = |subset: &[usize]| {
        let s: Vec<f64> = subset.iter().map(|&i| pooled[i]).collect();
        2.0 * sorted_sum(&s) - total
    };
    let observed = 2.0 * sorted_sum(&sa) - total;

    let count = binomial(n, a.len());
    let exhaustive = match mode {
        PermutationMode::Exhaustive => true,
        PermutationMode::Sampled { .. } => false,
        PermutationMode::Auto { .. } => count <= EXHAUSTIVE_LIMIT,
    };
    let (hits, perms) = if exhaustive {
        let mut hits = 0usize;
        let mut perms = 0usize;
        for_each_combination(n, a.len(), |c| {
            perms += 1;
            if stat_of(c) >= observed - tol {
                hits += 1;
            }
        });
        (hits, perms)
    } else {
        let (samples, seed) = match mode {
            PermutationMode::Auto { samples, seed } | PermutationMode::Sampled { samples, seed } => {
                (samples, seed)
            }
            PermutationMode::Exhaustive => unreachable!(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut hits = 0usize;
        for _ in 0..samples {
            idx.shuffle(&mut rng);
            if stat_of(&idx[..a.len()]) >= observed - tol {
                hits += 1;
            }
        }
        (hits, samples)
    };
    let p_value = hits as f64 / perms as f64;

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 0.0) {
        return Err(BiasError::UndefinedEffectSize { statistic, p_value });
    }
    let mu_a = sorted_sum(&sa) / sa.len() as f64;
    let mu_b = sorted_sum(&sb) / sb.len() as f64;
    Ok(WeatResult {
        statistic,
        effect_size: (mu_a - mu_b) / std,
        p_value,
        permutations: perms,
        exhaustive,
    })
}

/// Association test with terms embedded by `embed`.
pub fn weat<F>(spec: &WeatSpec, embed: F, mode: PermutationMode) -> Result<WeatResult, BiasError>
where
    F: Fn(&str) -> Result<Vec<f64>, BiasError>,
{
    let vecs = |words: &[String]| words.iter().map(|w| embed(w)).collect::<Result<Vec<_>, _>>();
    weat_vectors(
        &vecs(&spec.a.words)?,
        &vecs(&spec.b.words)?,
        &vecs(&spec.x.words)?,
        &vecs(&spec.y.words)?,
        mode,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeatEntry {
    pub label: String,
    pub statistic: Option<f64>,
    pub effect_size: Option<f64>,
    pub p_value: Option<f64>,
    pub error: Option<String>,
}

impl SeatEntry {
    fn from_result(label: &str, r: Result<WeatResult, BiasError>) -> Self {
        match r {
            Ok(w) => Self {
                label: label.into(),
                statistic: Some(w.statistic),
                effect_size: Some(w.effect_size),
                p_value: Some(w.p_value),
                error: None,
            },
            Err(e) => {
                let (statistic, p_value) = match e {
                    BiasError::UndefinedEffectSize { statistic, p_value } => (Some(statistic), Some(p_value)),
                    _ => (None, None),
                };
                Self {
                    label: label.into(),
                    statistic,
                    effect_size: None,
                    p_value,
                    error: Some(e.to_string()),
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeatSuiteResult {
    pub tests: Vec<SeatEntry>,
    /// Mean absolute effect size over tests where it is defined.
    pub mean_abs_effect: Option<f64>,
}

pub fn mean_abs_effect(effects: &[f64]) -> Option<f64> {
    (!effects.is_empty()).then(|| effects.iter().map(|e| e.abs()).sum::<f64>() / effects.len() as f64)
}

/// Embeds every word as the mean sentence embedding of its templated
/// sentences, then runs each test.
pub fn seat_suite(
    snapshot: &LmSnapshot,
    tests: &[WeatSpec],
    templates: &[String],
    mode: PermutationMode,
) -> Result<SeatSuiteResult, BiasError> {
    if templates.is_empty() {
        return Err(BiasError::EmptyInput);
    }
    if let Some(t) = templates.iter().find(|t| !t.contains(WORD_SLOT)) {
        return Err(BiasError::MissingPlaceholder(t.clone()));
    }
    let mut words: Vec<&str> = tests
        .iter()
        .flat_map(|t| t.sets().into_iter().flat_map(|s| s.words.iter().map(String::as_str)))
        .collect();
    words.sort_unstable();
    words.dedup();
    let vocab = snapshot.vocab();
    let embedded: Vec<(String, Vec<f64>)> = words
        .par_iter()
        .map(|&w| {
            let mut acc: Option<Vec<f64>> = None;
            for t in templates {
                let seq = vocab.encode_with_bos(&t.replace(WORD_SLOT, w));
                let e = snapshot.sentence_embedding(&seq)?;
                match &mut acc {
                    None => acc = Some(e),
                    Some(a) => a.iter_mut().zip(&e).for_each(|(x, y)| *x += y),
                }
            }
            let mut v = acc.expect("templates nonempty");
            v.iter_mut().for_each(|x| *x /= templates.len() as f64);
            Ok((w.to_string(), v))
        })
        .collect::<Result<_, BiasError>>()?;
    let table: HashMap<String, Vec<f64>> = embedded.into_iter().collect();
    let entries: Vec<SeatEntry> = tests
        .iter()
        .map(|spec| {
            let r = weat(spec, |w| Ok(table[w].clone()), mode);
            SeatEntry::from_result(&spec.label, r)
        })
        .collect();
    let effects: Vec<f64> = entries.iter().filter_map(|e| e.effect_size).collect();
    Ok(SeatSuiteResult {
        mean_abs_effect: mean_abs_effect(&effects),
        tests: entries,
    })
}

/// `100 * units / total`, snapped to a 2^-46 grid. Every grid value in
/// [0, 100] has an exactly representable complement, so
/// `percent(total - u, total) == 100.0 - percent(u, total)` holds bit for bit.
fn percent(units: usize, total: usize) -> f64 {
    const GRID: f64 = (1u64 << 46) as f64;
    let snap = |u: usize| (100.0 * u as f64 / total as f64 * GRID).round() / GRID;
    if 2 * units <= total {
        snap(units)
    } else {
        100.0 - snap(total - units)
    }
}

/// Exact win counts; percentages are derived from half-unit totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairwiseCounts {
    pub first: usize,
    pub second: usize,
    pub ties: usize,
}

impl PairwiseCounts {
    pub fn total(&self) -> usize {
        self.first + self.second + self.ties
    }

    fn record(&mut self, a: f64, b: f64) {
        if a > b {
            self.first += 1;
        } else if b > a {
            self.second += 1;
        } else {
            self.ties += 1;
        }
    }

    /// Wins for the first side in half units (a tie is one half unit).
    pub fn first_half_units(&self) -> usize {
        2 * self.first + self.ties
    }

    pub fn first_percent(&self) -> f64 {
        percent(self.first_half_units(), 2 * self.total())
    }

    pub fn second_percent(&self) -> f64 {
        percent(2 * self.second + self.ties, 2 * self.total())
    }

    pub fn swapped(&self) -> Self {
        Self {
            first: self.second,
            second: self.first,
            ties: self.ties,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BecProResult {
    /// Percentage of pairs where the male variant is more likely.
    pub score: f64,
    /// `first` = male-dominated, `second` = female-dominated.
    pub counts: PairwiseCounts,
}

impl BecProResult {
    pub fn female_score(&self) -> f64 {
        self.counts.second_percent()
    }
}

/// Every (template, person pair, profession) sentence pair.
pub fn becpro_pairs(set: &PairTemplateSet) -> Result<Vec<(String, String)>, BiasError> {
    if let Some(t) = set
        .templates
        .iter()
        .find(|t| t.matches("<person>").count() != 1 || t.matches("<profession>").count() != 1)
    {
        return Err(BiasError::MissingPlaceholder(t.clone()));
    }
    let mut out = Vec::new();
    for t in &set.templates {
        for (m, f) in &set.person_pairs {
            for p in set.professions.all() {
                out.push((fill_template(t, m, p), fill_template(t, f, p)));
            }
        }
    }
    Ok(out)
}

pub fn becpro_score(snapshot: &LmSnapshot, set: &PairTemplateSet) -> Result<BecProResult, BiasError> {
    let vocab = snapshot.vocab();
    let mut oov: Vec<String> = set
        .person_pairs
        .iter()
        .flat_map(|(m, f)| [m, f])
        .chain(set.professions.all())
        .flat_map(|phrase| vocab.out_of_vocabulary(phrase))
        .map(String::from)
        .collect();
    oov.sort();
    oov.dedup();
    if !oov.is_empty() {
        return Err(BiasError::OutOfVocabulary(oov));
    }
    let pairs = becpro_pairs(set)?;
    if pairs.is_empty() {
        return Err(BiasError::EmptyInput);
    }
    let scored: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|(m, f)| {
            let lm = snapshot.sequence_log_likelihood(&vocab.encode_with_bos(m))?.total;
            let lf = snapshot.sequence_log_likelihood(&vocab.encode_with_bos(f))?.total;
            Ok((lm, lf))
        })
        .collect::<Result<_, BiasError>>()?;
    let mut counts = PairwiseCounts {
        first: 0,
        second: 0,
        ties: 0,
    };
    for (m, f) in scored {
        counts.record(m, f);
    }
    Ok(BecProResult {
        score: counts.first_percent(),
        counts,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoResult {
    pub lms: f64,
    pub ss: f64,
    /// `first` = meaningful option beats the meaningless one.
    pub lms_counts: PairwiseCounts,
    /// `first` = stereotypical option beats the anti-stereotypical one.
    pub ss_counts: PairwiseCounts,
}

/// Per-token mean log-likelihood of the three candidates of one item, in
/// the order (stereotype, anti-stereotype, meaningless).
pub fn stereo_candidate_scores(
    snapshot: &LmSnapshot,
    item: &StereoItem,
    index: usize,
) -> Result<[f64; 3], BiasError> {
    let vocab = snapshot.vocab();
    let options = [&item.stereo, &item.anti, &item.meaningless];
    let mut out = [0.0; 3];
    match item.kind {
        StereoKind::Intrasentence => {
            if !item.context.split_whitespace().any(|w| w == BLANK) {
                return Err(BiasError::MissingBlank(index));
            }
            for (o, opt) in out.iter_mut().zip(options) {
                let filled: Vec<&str> = item
                    .context
                    .split_whitespace()
                    .map(|w| if w == BLANK { opt.as_str() } else { w })
                    .collect();
                let seq = vocab.encode_with_bos(&filled.join(" "));
                *o = snapshot.sequence_log_likelihood(&seq)?.mean;
            }
        }
        StereoKind::Intersentence => {
            let mut prefix = vec![BOS_ID];
            prefix.extend(vocab.encode(&item.context));
            for (o, opt) in out.iter_mut().zip(options) {
                let mut ids = prefix.clone();
                ids.extend(vocab.encode(opt));
                let seq = TokenSequence::new(ids);
                *o = snapshot.span_log_likelihood(&seq, prefix.len())?.mean;
            }
        }
    }
    Ok(out)
}

pub fn stereoset_score(snapshot: &LmSnapshot, items: &[StereoItem]) -> Result<StereoResult, BiasError> {
    if items.is_empty() {
        return Err(BiasError::EmptyInput);
    }
    let scores: Vec<[f64; 3]> = items
        .par_iter()
        .enumerate()
        .map(|(i, item)| stereo_candidate_scores(snapshot, item, i))
        .collect::<Result<_, _>>()?;
    Ok(stereo_from_scores(&scores))
}

/// Aggregates (stereotype, anti, meaningless) candidate scores.
pub fn stereo_from_scores(scores: &[[f64; 3]]) -> StereoResult {
    let zero = PairwiseCounts {
        first: 0,
        second: 0,
        ties: 0,
    };
    let (mut lms, mut ss) = (zero, zero);
    for &[s, a, m] in scores {
        lms.record(s.max(a), m);
        ss.record(s, a);
    }
    StereoResult {
        lms: lms.first_percent(),
        ss: ss.first_percent(),
        lms_counts: lms,
        ss_counts: ss,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasScorecard {
    pub seat: SeatSuiteResult,
    pub becpro: f64,
    pub lms: f64,
    pub ss: f64,
}
