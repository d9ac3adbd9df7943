//! Corpus ingestion: sentence loading, vocabulary construction, word-level
//! tokenization, fixed-length chunking and train/dev splitting.
//!
//! Tokenization is plain whitespace splitting with optional lowercasing.
//! Punctuation must therefore be separated by spaces in the source text for
//! it to become a token of its own.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";
pub const NUM_SPECIALS: usize = 3;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line} is not valid UTF-8")]
    Decode { path: PathBuf, line: usize },
    #[error("vocabulary max size {0} leaves no room for regular tokens (need at least {min})", min = NUM_SPECIALS + 1)]
    VocabTooSmall(usize),
    #[error("chunk size must be at least 2, got {0}")]
    ChunkTooSmall(usize),
    #[error("gender skew must lie in [0, 1], got {0}")]
    InvalidSkew(f64),
    #[error("split ratio must lie in (0, 1), got {0}")]
    InvalidRatio(f64),
    #[error("vocabulary file {path}, line {line}: {reason}")]
    VocabFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Loads one sentence per line, keeping those with at least `min_tokens`
/// whitespace-separated tokens.
pub fn load_corpus(path: impl AsRef<Path>, min_tokens: usize) -> Result<Vec<String>, CorpusError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus_bytes(&bytes, min_tokens).map_err(|line| CorpusError::Decode {
        path: path.to_path_buf(),
        line,
    })
}

/// Splits raw bytes into lines and filters them. The error carries the
/// 1-based number of the first line that fails to decode.
pub fn parse_corpus_bytes(bytes: &[u8], min_tokens: usize) -> Result<Vec<String>, usize> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    let mut out = Vec::new();
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| i + 1)?;
        if line.split_whitespace().count() >= min_tokens {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

/// Uniformly subsamples sentences, keeping file order among the survivors.
pub fn subsample(sentences: &[String], fraction: f64, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sentences
        .iter()
        .filter(|_| rng.random::<f64>() < fraction)
        .cloned()
        .collect()
}

/// Token inventory with the three specials fixed at ids 0, 1 and 2.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "RawVocabulary")]
pub struct Vocabulary {
    tokens: Vec<String>,
    lowercase: bool,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

#[derive(Deserialize)]
struct RawVocabulary {
    tokens: Vec<String>,
    lowercase: bool,
}

impl From<RawVocabulary> for Vocabulary {
    fn from(raw: RawVocabulary) -> Self {
        let mut v = Self {
            tokens: raw.tokens,
            lowercase: raw.lowercase,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }
}

impl fmt::Debug for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Vocabulary")
            .field("size", &self.tokens.len())
            .field("lowercase", &self.lowercase)
            .finish()
    }
}

impl Vocabulary {
    /// Builds a vocabulary from regular (non-special) tokens, in id order.
    pub fn from_tokens<I, S>(regular: I, lowercase: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for t in regular {
            let t = t.into();
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        let mut v = Self {
            tokens,
            lowercase,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    /// Normalizes a raw word according to the casing policy.
    pub fn normalize(&self, word: &str) -> String {
        if self.lowercase {
            word.to_lowercase()
        } else {
            word.to_string()
        }
    }

    /// Maps a raw word to its id, falling back to the unknown id.
    pub fn lookup(&self, word: &str) -> u32 {
        if self.lowercase {
            self.id(&word.to_lowercase()).unwrap_or(UNK_ID)
        } else {
            self.id(word).unwrap_or(UNK_ID)
        }
    }

    /// Tokenizes a sentence into ids (no BOS, no padding).
    pub fn encode(&self, sentence: &str) -> Vec<u32> {
        sentence.split_whitespace().map(|w| self.lookup(w)).collect()
    }

    /// Tokenizes a sentence and prepends the begin-of-sequence id, so that
    /// every word of the sentence is a scored next-token target.
    pub fn encode_with_bos(&self, sentence: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(sentence.len() / 4 + 1);
        ids.push(BOS_ID);
        ids.extend(sentence.split_whitespace().map(|w| self.lookup(w)));
        TokenSequence::new(ids)
    }

    /// Words of `sentence` that are not in the vocabulary.
    pub fn out_of_vocabulary<'a>(&self, sentence: &'a str) -> Vec<&'a str> {
        sentence
            .split_whitespace()
            .filter(|w| self.lookup(w) == UNK_ID)
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect()
    }

    /// Content hash binding checkpoints to a tokenization.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(if self.lowercase { b"lc:1\n" } else { b"lc:0\n" });
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One regular token per line; line `i` (0-based) holds id `i + 3`.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens[NUM_SPECIALS..] {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>, lowercase: bool) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut seen = HashMap::new();
        let mut regular = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.chars().any(char::is_whitespace) {
                return Err(CorpusError::VocabFile {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: "token must be non-empty and contain no whitespace".into(),
                });
            }
            if [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN].contains(&line) || seen.insert(line, i).is_some() {
                return Err(CorpusError::VocabFile {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: format!("duplicate token {line:?}"),
                });
            }
            regular.push(line.to_string());
        }
        Ok(Self::from_tokens(regular, lowercase))
    }
}

/// Counts tokens and keeps the `max_size - 3` most frequent ones, breaking
/// frequency ties lexicographically.
pub fn build_vocabulary(
    sentences: &[String],
    max_size: usize,
    lowercase: bool,
) -> Result<Vocabulary, CorpusError> {
    if max_size < NUM_SPECIALS + 1 {
        return Err(CorpusError::VocabTooSmall(max_size));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in sentences {
        for w in s.split_whitespace() {
            let w = if lowercase { w.to_lowercase() } else { w.to_string() };
            if [PAD_TOKEN, UNK_TOKEN, BOS_TOKEN].contains(&w.as_str()) {
                continue;
            }
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Ok(Vocabulary::from_tokens(
        ranked.into_iter().map(|(t, _)| t),
        lowercase,
    ))
}

/// A sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of non-pad ids.
    pub fn content_len(&self) -> usize {
        self.0.iter().filter(|&&id| id != PAD_ID).count()
    }

    /// Length once trailing pads are removed.
    pub fn trimmed_len(&self) -> usize {
        self.0
            .iter()
            .rposition(|&id| id != PAD_ID)
            .map_or(0, |p| p + 1)
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Concatenates the token streams of all sentences and cuts the result into
/// chunks of exactly `chunk_size`, padding the final partial chunk. A final
/// chunk holding a single token has no prediction target and is dropped.
pub fn tokenize_and_chunk(
    sentences: &[String],
    vocab: &Vocabulary,
    chunk_size: usize,
) -> Result<Vec<TokenSequence>, CorpusError> {
    if chunk_size < 2 {
        return Err(CorpusError::ChunkTooSmall(chunk_size));
    }
    let stream: Vec<u32> = sentences.iter().flat_map(|s| vocab.encode(s)).collect();
    Ok(stream
        .chunks(chunk_size)
        .filter(|c| c.len() >= 2)
        .map(|c| {
            let mut ids = c.to_vec();
            ids.resize(chunk_size, PAD_ID);
            TokenSequence(ids)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<TokenSequence>,
    pub dev: Vec<TokenSequence>,
    pub ratio: f64,
}

/// Seeded shuffle of chunk indices followed by a `ratio` cut.
pub fn split_chunks(
    chunks: Vec<TokenSequence>,
    ratio: f64,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (ratio * chunks.len() as f64).round() as usize;
    let mut slots: Vec<Option<TokenSequence>> = chunks.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("index used once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let dev = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok(CorpusSplit { train, dev, ratio })
}

/// Which gendered group a generated person word belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gender {
    Male,
    Female,
}

const FILLER_ADJ: &[&str] = &[
    "old", "new", "small", "large", "quiet", "busy", "bright", "dark", "warm", "cold", "green",
    "red", "blue", "happy", "tired", "early", "late", "strange", "famous", "simple",
];
const FILLER_NOUN: &[&str] = &[
    "house", "river", "window", "garden", "train", "letter", "street", "table", "forest",
    "market", "bridge", "city", "road", "door", "book", "song", "storm", "village", "ship",
    "lamp", "clock", "hill", "field", "church",
];
const FILLER_VERB: &[&str] = &[
    "crossed", "watched", "found", "opened", "passed", "painted", "followed", "closed",
    "visited", "left", "cleaned", "carried",
];
const ATTR_VERBS: &[&str] = &["talks about the", "thinks about the", "likes the", "cares about the"];
const MALE_STEREO_ATTRS: &[&str] = &["career", "math", "science"];
const FEMALE_STEREO_ATTRS: &[&str] = &["family", "arts"];

/// Lexicon behind the synthetic generator, drawn from the shipped
/// BEC-Pro and SEAT data.
struct Lexicon {
    male_persons: Vec<String>,
    female_persons: Vec<String>,
    professions: [Vec<String>; 3],
    templates: Vec<String>,
    attributes_male: Vec<String>,
    attributes_female: Vec<String>,
    seat_words: Vec<String>,
}

impl Lexicon {
    fn load() -> Self {
        let becpro = data::becpro_templates();
        let mut male_persons: Vec<String> =
            becpro.person_pairs.iter().map(|p| p.0.clone()).collect();
        let mut female_persons: Vec<String> =
            becpro.person_pairs.iter().map(|p| p.1.clone()).collect();
        for pair in data::name_pairs().iter().take(24) {
            male_persons.push(pair.0.clone());
            female_persons.push(pair.1.clone());
        }
        let seat = data::seat_tests();
        let mut sets: HashMap<String, Vec<String>> = HashMap::new();
        for spec in &seat {
            for set in spec.sets() {
                sets.entry(set.name.to_lowercase())
                    .or_insert_with(|| set.words.iter().map(|w| w.to_lowercase()).collect());
            }
        }
        let collect = |names: &[&str]| -> Vec<String> {
            names
                .iter()
                .flat_map(|n| sets.get(*n).cloned().unwrap_or_default())
                .collect()
        };
        let attributes_male = collect(MALE_STEREO_ATTRS);
        let attributes_female = collect(FEMALE_STEREO_ATTRS);
        let mut seat_words: Vec<String> = sets.values().flatten().cloned().collect();
        seat_words.sort();
        seat_words.dedup();
        for name in sets.get("male names").into_iter().flatten() {
            male_persons.push(name.clone());
        }
        for name in sets.get("female names").into_iter().flatten() {
            female_persons.push(name.clone());
        }
        Self {
            male_persons,
            female_persons,
            professions: [
                becpro.professions.male.clone(),
                becpro.professions.female.clone(),
                becpro.professions.balanced.clone(),
            ],
            templates: becpro.templates.clone(),
            attributes_male,
            attributes_female,
            seat_words,
        }
    }
}

/// One generated sentence together with the gender annotations the
/// generator used, so that co-occurrence statistics can be checked.
#[derive(Clone, Debug)]
pub struct SyntheticSentence {
    pub text: String,
    pub person: Option<Gender>,
    /// `Some(Male)` for a male-dominated profession, `Some(Female)` for a
    /// female-dominated one, `None` for balanced professions or no profession.
    pub profession: Option<Gender>,
}

fn pick<'a, R: Rng>(rng: &mut R, items: &'a [String]) -> &'a str {
    &items[rng.random_range(0..items.len())]
}

fn pick_str<'a, R: Rng>(rng: &mut R, items: &[&'a str]) -> &'a str {
    items[rng.random_range(0..items.len())]
}

fn gendered_person<R: Rng>(rng: &mut R, lex: &Lexicon, male: bool) -> (String, Gender) {
    if male {
        (pick(rng, &lex.male_persons).to_string(), Gender::Male)
    } else {
        (pick(rng, &lex.female_persons).to_string(), Gender::Female)
    }
}

/// Generates annotated templated sentences. With probability `gender_skew` a
/// sentence about a male-dominated profession (or male-stereotyped topic)
/// uses a male person word, and likewise for the female side.
pub fn make_synthetic_annotated(
    seed: u64,
    n_sentences: usize,
    gender_skew: f64,
) -> Result<Vec<SyntheticSentence>, CorpusError> {
    if !(0.0..=1.0).contains(&gender_skew) {
        return Err(CorpusError::InvalidSkew(gender_skew));
    }
    let lex = Lexicon::load();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let kind: f64 = rng.random();
        let sentence = if kind < 0.45 {
            let group = rng.random_range(0..3usize);
            let profession = pick(&mut rng, &lex.professions[group]).to_string();
            let (male, prof_gender) = match group {
                0 => (rng.random::<f64>() < gender_skew, Some(Gender::Male)),
                1 => (rng.random::<f64>() >= gender_skew, Some(Gender::Female)),
                _ => (rng.random::<f64>() < 0.5, None),
            };
            let (person, gender) = gendered_person(&mut rng, &lex, male);
            let template = pick(&mut rng, &lex.templates);
            let text = fill_template(template, &person, &profession);
            SyntheticSentence {
                text,
                person: Some(gender),
                profession: prof_gender,
            }
        } else if kind < 0.70 {
            let male_topic = rng.random::<bool>();
            let male = if male_topic {
                rng.random::<f64>() < gender_skew
            } else {
                rng.random::<f64>() >= gender_skew
            };
            let attr = if male_topic {
                pick(&mut rng, &lex.attributes_male).to_string()
            } else {
                pick(&mut rng, &lex.attributes_female).to_string()
            };
            let (person, gender) = gendered_person(&mut rng, &lex, male);
            let verb = pick_str(&mut rng, ATTR_VERBS);
            SyntheticSentence {
                text: format!("{person} {verb} {attr} ."),
                person: Some(gender),
                profession: None,
            }
        } else if kind < 0.80 {
            let word = pick(&mut rng, &lex.seat_words);
            let lead = pick_str(&mut rng, &["this is", "that is", "there is", "here is"]);
            SyntheticSentence {
                text: format!("{lead} {} {word} .", article_for(word)),
                person: None,
                profession: None,
            }
        } else {
            let text = format!(
                "the {} {} {} the {} {} .",
                pick_str(&mut rng, FILLER_ADJ),
                pick_str(&mut rng, FILLER_NOUN),
                pick_str(&mut rng, FILLER_VERB),
                pick_str(&mut rng, FILLER_ADJ),
                pick_str(&mut rng, FILLER_NOUN),
            );
            SyntheticSentence {
                text,
                person: None,
                profession: None,
            }
        };
        out.push(sentence);
    }
    Ok(out)
}

/// Deterministic synthetic corpus; see [`make_synthetic_annotated`].
pub fn make_synthetic_corpus(
    seed: u64,
    n_sentences: usize,
    gender_skew: f64,
) -> Result<Vec<String>, CorpusError> {
    Ok(make_synthetic_annotated(seed, n_sentences, gender_skew)?
        .into_iter()
        .map(|s| s.text)
        .collect())
}

/// "a" or "an" depending on the first letter of `word`.
pub fn article_for(word: &str) -> &'static str {
    match word.chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

/// Substitutes `<person>` and `<profession>`, fixing the article in front
/// of the profession.
pub fn fill_template(template: &str, person: &str, profession: &str) -> String {
    let template = template.replace("a <profession>", &format!("{} <profession>", article_for(profession)));
    template
        .replace("<person>", person)
        .replace("<profession>", profession)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(items: &[&str]) -> Vec<String> {
        items.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn short_lines_are_skipped() {
        let out = parse_corpus_bytes(b"a b c\na b c d\n", 4).unwrap();
        assert_eq!(out, s(&["a b c d"]));
    }

    #[test]
    fn empty_file_and_zero_filter() {
        assert!(parse_corpus_bytes(b"", 4).unwrap().is_empty());
        let out = parse_corpus_bytes(b"x\n\ny z", 0).unwrap();
        assert_eq!(out, s(&["x", "", "y z"]));
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let err = parse_corpus_bytes(b"ok line\n\xff\xfe\n", 0).unwrap_err();
        assert_eq!(err, 2);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_corpus("/nonexistent/corpus.txt", 1).unwrap_err();
        assert!(matches!(err, CorpusError::Io { .. }));
    }

    #[test]
    fn vocabulary_frequency_and_ties() {
        let v = build_vocabulary(&s(&["a a b"]), 10, true).unwrap();
        assert_eq!(v.len(), 5);
        assert!(v.id("a").is_some() && v.id("b").is_some());

        let v = build_vocabulary(&s(&["b a", "a"]), 4, true).unwrap();
        assert_eq!(v.tokens()[3..], ["a".to_string()]);

        let v = build_vocabulary(&s(&["b a"]), 4, true).unwrap();
        assert_eq!(v.tokens()[3], "a");

        assert!(matches!(
            build_vocabulary(&s(&["a"]), 3, true),
            Err(CorpusError::VocabTooSmall(3))
        ));
    }

    #[test]
    fn specials_fixed_and_bijective() {
        let v = build_vocabulary(&s(&["x y z x"]), 100, true).unwrap();
        assert_eq!(v.token(PAD_ID), Some(PAD_TOKEN));
        assert_eq!(v.token(UNK_ID), Some(UNK_TOKEN));
        assert_eq!(v.token(BOS_ID), Some(BOS_TOKEN));
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as u32));
        }
    }

    #[test]
    fn chunking_pads_last_chunk() {
        let sentences = s(&["a b c d e f g h i j"]);
        let v = build_vocabulary(&sentences, 100, true).unwrap();
        let chunks = tokenize_and_chunk(&sentences, &v, 4).unwrap();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].ids()[2..], [PAD_ID, PAD_ID]);
        assert!(chunks.iter().all(|c| c.len() == 4));

        let sentences = s(&["a b c d e f g h"]);
        let chunks = tokenize_and_chunk(&sentences, &v, 4).unwrap();
        assert_eq!(chunks.len(), 2);
        assert!(chunks.iter().all(|c| c.content_len() == 4));
    }

    #[test]
    fn oov_maps_to_unknown() {
        let v = build_vocabulary(&s(&["a b"]), 100, true).unwrap();
        let chunks = tokenize_and_chunk(&s(&["a zzz b"]), &v, 3).unwrap();
        assert_eq!(chunks[0].ids()[1], UNK_ID);
        assert!(tokenize_and_chunk(&[], &v, 3).unwrap().is_empty());
        assert!(matches!(
            tokenize_and_chunk(&[], &v, 1),
            Err(CorpusError::ChunkTooSmall(1))
        ));
    }

    #[test]
    fn lowercasing_policy() {
        let v = build_vocabulary(&s(&["John met JOHN"]), 10, true).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.lookup("JoHn"), v.id("john").unwrap());
        let v = build_vocabulary(&s(&["John met JOHN"]), 10, false).unwrap();
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn split_ratio_and_disjointness() {
        let chunks: Vec<TokenSequence> = (0..23).map(|i| TokenSequence::new(vec![i + 3, 0])).collect();
        let split = split_chunks(chunks.clone(), 0.8, 7).unwrap();
        assert_eq!(split.train.len() + split.dev.len(), 23);
        let frac = split.train.len() as f64 / 23.0;
        assert!((frac - 0.8).abs() <= 1.0 / 23.0);
        for t in &split.train {
            assert!(!split.dev.contains(t));
        }
        assert_eq!(split, split_chunks(chunks, 0.8, 7).unwrap());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = build_vocabulary(&s(&["q w e r t y"]), 100, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocabulary::load(&p, true).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.hash(), v.hash());
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = make_synthetic_corpus(1, 50, 0.7).unwrap();
        let b = make_synthetic_corpus(1, 50, 0.7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_synthetic_corpus(2, 50, 0.7).unwrap());
        assert!(make_synthetic_corpus(1, 0, 0.5).unwrap().is_empty());
        assert!(matches!(
            make_synthetic_corpus(1, 10, 1.5),
            Err(CorpusError::InvalidSkew(_))
        ));
    }

    #[test]
    fn synthetic_skew_controls_cooccurrence() {
        // Independent count over the annotations the generator emitted.
        for skew in [0.5, 0.9] {
            let sents = make_synthetic_annotated(11, 6000, skew).unwrap();
            let male_prof: Vec<_> = sents
                .iter()
                .filter(|s| s.profession == Some(Gender::Male))
                .collect();
            let male_male = male_prof
                .iter()
                .filter(|s| s.person == Some(Gender::Male))
                .count();
            let frac = male_male as f64 / male_prof.len() as f64;
            assert!((frac - skew).abs() <= 0.05, "skew {skew}: observed {frac}");
        }
    }

    #[test]
    fn article_and_template_filling() {
        assert_eq!(
            fill_template("<person> is a <profession> .", "he", "electrician"),
            "he is an electrician ."
        );
        assert_eq!(
            fill_template("<person> is a <profession> .", "this man", "carpenter"),
            "this man is a carpenter ."
        );
    }
}
