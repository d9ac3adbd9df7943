//! Counterfactual data augmentation over word-pair tables.
//!
//! A table maps single tokens to their counterparts. Bidirectional pairs
//! contribute both directions; `oneway` rows only the left-to-right one.
//! Substitution is token-exact after the vocabulary's casing policy, so it
//! never changes sequence length.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, Vocabulary, UNK_ID};

#[derive(Debug, Error)]
pub enum CdaError {
    #[error("cannot read pair file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{source_name}, line {line}: {reason}")]
    Parse {
        source_name: String,
        line: usize,
        reason: String,
    },
    #[error("{source_name}, line {line}: {token:?} already maps to {existing:?}, cannot also map to {new:?}")]
    DuplicateSource {
        source_name: String,
        line: usize,
        token: String,
        existing: String,
        new: String,
    },
    #[error("replacement {0:?} is not in the vocabulary")]
    ReplacementOutOfVocabulary(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPair {
    pub left: String,
    pub right: String,
    pub bidirectional: bool,
}

/// What to do when a replacement word has no vocabulary id.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OovPolicy {
    #[default]
    MapToUnknown,
    Error,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentMode {
    OneSided,
    TwoSided,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WordPairTable {
    pairs: Vec<WordPair>,
    index: HashMap<String, String>,
}

impl WordPairTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> &[WordPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn replacement(&self, token: &str) -> Option<&str> {
        self.index.get(token).map(String::as_str)
    }

    /// Every token that has a replacement.
    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    /// Adds one pair. A source that already maps to a different word is
    /// rejected; re-adding an identical mapping is a no-op.
    pub fn add(&mut self, pair: WordPair, source_name: &str, line: usize) -> Result<(), CdaError> {
        if pair.left == pair.right {
            return Err(CdaError::Parse {
                source_name: source_name.to_string(),
                line,
                reason: format!("pair maps {:?} onto itself", pair.left),
            });
        }
        // Validate both directions before mutating so a failed row leaves
        // the table untouched.
        let check = |from: &str, to: &str| match self.index.get(from) {
            Some(existing) if existing != to => Err(CdaError::DuplicateSource {
                source_name: source_name.to_string(),
                line,
                token: from.to_string(),
                existing: existing.clone(),
                new: to.to_string(),
            }),
            _ => Ok(()),
        };
        check(&pair.left, &pair.right)?;
        if pair.bidirectional {
            check(&pair.right, &pair.left)?;
        }
        self.index.insert(pair.left.clone(), pair.right.clone());
        if pair.bidirectional {
            self.index.insert(pair.right.clone(), pair.left.clone());
        }
        self.pairs.push(pair);
        Ok(())
    }

    /// Parses `left<TAB>right[<TAB>oneway]` rows; `#` lines and blank lines
    /// are ignored. Entries are lowercased when `lowercase` is set.
    pub fn parse_tsv(&mut self, text: &str, source_name: &str, lowercase: bool) -> Result<(), CdaError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').map(str::trim).collect();
            let parse_err = |reason: String| CdaError::Parse {
                source_name: source_name.to_string(),
                line,
                reason,
            };
            let bidirectional = match cols.as_slice() {
                [_, _] => true,
                [_, _, "oneway"] => false,
                [_, _, other] => return Err(parse_err(format!("unknown flag {other:?}"))),
                _ => return Err(parse_err(format!("expected 2 or 3 tab-separated columns, got {}", cols.len()))),
            };
            let norm = |s: &str| if lowercase { s.to_lowercase() } else { s.to_string() };
            let (left, right) = (norm(cols[0]), norm(cols[1]));
            if left.is_empty() || right.is_empty() || left.contains(char::is_whitespace) || right.contains(char::is_whitespace) {
                return Err(parse_err("pair entries must be single non-empty tokens".into()));
            }
            self.add(
                WordPair {
                    left,
                    right,
                    bidirectional,
                },
                source_name,
                line,
            )?;
        }
        Ok(())
    }

    pub fn from_tsv(text: &str, source_name: &str, lowercase: bool) -> Result<Self, CdaError> {
        let mut t = Self::new();
        t.parse_tsv(text, source_name, lowercase)?;
        Ok(t)
    }

    /// Loads and merges several pair files into one table.
    pub fn load_pairs<P: AsRef<Path>>(paths: &[P], lowercase: bool) -> Result<Self, CdaError> {
        let mut t = Self::new();
        for p in paths {
            let p = p.as_ref();
            let text = std::fs::read_to_string(p).map_err(|source| CdaError::Io {
                path: p.display().to_string(),
                source,
            })?;
            t.parse_tsv(&text, &p.display().to_string(), lowercase)?;
        }
        Ok(t)
    }

    /// Resolves the table against a vocabulary into an id-to-id map.
    pub fn compile(&self, vocab: &Vocabulary, policy: OovPolicy) -> Result<CompiledTable, CdaError> {
        let mut map = HashMap::new();
        for (from, to) in &self.index {
            let Some(from_id) = vocab.id(&vocab.normalize(from)) else {
                continue;
            };
            let to_id = match (vocab.id(&vocab.normalize(to)), policy) {
                (Some(id), _) => id,
                (None, OovPolicy::MapToUnknown) => UNK_ID,
                (None, OovPolicy::Error) => return Err(CdaError::ReplacementOutOfVocabulary(to.clone())),
            };
            map.insert(from_id, to_id);
        }
        Ok(CompiledTable { map })
    }
}

/// A pair table resolved to token ids for one vocabulary.
#[derive(Clone, Debug, Default)]
pub struct CompiledTable {
    map: HashMap<u32, u32>,
}

impl CompiledTable {
    pub fn apply(&self, seq: &TokenSequence) -> TokenSequence {
        TokenSequence::new(
            seq.ids()
                .iter()
                .map(|id| self.map.get(id).copied().unwrap_or(*id))
                .collect(),
        )
    }

    pub fn touches(&self, seq: &TokenSequence) -> bool {
        seq.ids().iter().any(|id| self.map.contains_key(id))
    }
}

/// Replaces every token that has a table entry.
pub fn augment_sequence(
    seq: &TokenSequence,
    table: &WordPairTable,
    vocab: &Vocabulary,
    policy: OovPolicy,
) -> Result<TokenSequence, CdaError> {
    Ok(table.compile(vocab, policy)?.apply(seq))
}

/// One-sided mode replaces each chunk by its augmented form; two-sided mode
/// keeps every original and inserts the augmented copy right after it when
/// the augmentation changed something.
pub fn augment_corpus(
    chunks: &[TokenSequence],
    table: &WordPairTable,
    vocab: &Vocabulary,
    mode: AugmentMode,
    policy: OovPolicy,
) -> Result<Vec<TokenSequence>, CdaError> {
    let compiled = table.compile(vocab, policy)?;
    let mut out = Vec::with_capacity(chunks.len() * 2);
    for c in chunks {
        let aug = compiled.apply(c);
        match mode {
            AugmentMode::OneSided => out.push(aug),
            AugmentMode::TwoSided => {
                let changed = aug != *c;
                out.push(c.clone());
                if changed {
                    out.push(aug);
                }
            }
        }
    }
    Ok(out)
}

/// Sentence-level augmentation of raw text (used by the CLI).
pub fn augment_words(sentence: &str, table: &WordPairTable, lowercase: bool) -> String {
    sentence
        .split_whitespace()
        .map(|w| {
            let key = if lowercase { w.to_lowercase() } else { w.to_string() };
            table.replacement(&key).map_or(key, str::to_string)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;

    fn vocab() -> Vocabulary {
        build_vocabulary(
            &["he she is a carpenter his her book hers".to_string()],
            100,
            true,
        )
        .unwrap()
    }

    fn table() -> WordPairTable {
        WordPairTable::from_tsv("he\tshe\nhis\ther\n", "test", true).unwrap()
    }

    #[test]
    fn loads_bidirectional_pairs() {
        let t = table();
        assert_eq!(t.len(), 2);
        assert_eq!(t.replacement("she"), Some("he"));
        assert_eq!(t.replacement("her"), Some("his"));
    }

    #[test]
    fn oneway_rows_only_map_forward() {
        let t = WordPairTable::from_tsv("# comment\nhers\this\toneway\n", "t", true).unwrap();
        assert_eq!(t.replacement("hers"), Some("his"));
        assert_eq!(t.replacement("his"), None);
    }

    #[test]
    fn conflicting_source_is_rejected() {
        let err = WordPairTable::from_tsv("he\tshe\nhe\ther\n", "t.tsv", true).unwrap_err();
        match err {
            CdaError::DuplicateSource { token, line, .. } => {
                assert_eq!(token, "he");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows() {
        assert!(WordPairTable::from_tsv("he\n", "t", true).is_err());
        assert!(WordPairTable::from_tsv("he\tshe\tboth\n", "t", true).is_err());
        assert!(WordPairTable::from_tsv("he\the\n", "t", true).is_err());
    }

    #[test]
    fn substitutes_pair_words() {
        let v = vocab();
        let t = table();
        let seq = TokenSequence::new(v.encode("he is a carpenter"));
        let out = augment_sequence(&seq, &t, &v, OovPolicy::MapToUnknown).unwrap();
        assert_eq!(v.decode(out.ids()), ["she", "is", "a", "carpenter"]);

        let seq = TokenSequence::new(v.encode("his book"));
        let out = augment_sequence(&seq, &t, &v, OovPolicy::MapToUnknown).unwrap();
        assert_eq!(v.decode(out.ids()), ["her", "book"]);

        let seq = TokenSequence::new(v.encode("a carpenter is a carpenter"));
        assert_eq!(augment_sequence(&seq, &t, &v, OovPolicy::MapToUnknown).unwrap(), seq);
    }

    #[test]
    fn oov_replacement_policy() {
        let v = vocab();
        let t = WordPairTable::from_tsv("carpenter\tseamstress\n", "t", true).unwrap();
        let seq = TokenSequence::new(v.encode("a carpenter"));
        let out = augment_sequence(&seq, &t, &v, OovPolicy::MapToUnknown).unwrap();
        assert_eq!(out.ids()[1], UNK_ID);
        assert!(matches!(
            augment_sequence(&seq, &t, &v, OovPolicy::Error),
            Err(CdaError::ReplacementOutOfVocabulary(_))
        ));
    }

    #[test]
    fn corpus_modes_count() {
        let v = vocab();
        let t = table();
        let chunks: Vec<TokenSequence> = ["he is a", "a carpenter book", "her book is"]
            .iter()
            .map(|s| TokenSequence::new(v.encode(s)))
            .collect();
        let two = augment_corpus(&chunks, &t, &v, AugmentMode::TwoSided, OovPolicy::MapToUnknown).unwrap();
        assert_eq!(two.len(), 5);
        assert_eq!(two[0], chunks[0]);
        assert_eq!(v.decode(two[1].ids()), ["she", "is", "a"]);
        assert_eq!(two[2], chunks[1]);
        let one = augment_corpus(&chunks, &t, &v, AugmentMode::OneSided, OovPolicy::MapToUnknown).unwrap();
        assert_eq!(one.len(), 3);

        let plain = vec![chunks[1].clone()];
        assert_eq!(
            augment_corpus(&plain, &t, &v, AugmentMode::TwoSided, OovPolicy::MapToUnknown).unwrap(),
            plain
        );
    }

    #[test]
    fn word_level_helper() {
        assert_eq!(augment_words("He read HIS book", &table(), true), "she read her book");
    }
}
