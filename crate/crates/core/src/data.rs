//! Word lists, templates and probe sets compiled into the library.

use serde::{Deserialize, Serialize};

use crate::cda::{CdaError, WordPairTable};

/// Shipped replacement tables as `(source name, tsv text)`, in load order.
pub const PAIR_SOURCES: [(&str, &str); 4] = [
    ("names.tsv", include_str!("../data/pairs/names.tsv")),
    ("general.tsv", include_str!("../data/pairs/general.tsv")),
    ("extra.tsv", include_str!("../data/pairs/extra.tsv")),
    ("additional.tsv", include_str!("../data/pairs/additional.tsv")),
];

const BECPRO: &str = include_str!("../data/becpro.toml");
const SEAT_TEMPLATES: &str = include_str!("../data/seat/templates.txt");
const STEREOSET: &str = include_str!("../data/stereoset_tiny.jsonl");
const SEAT_FILES: [&str; 6] = [
    include_str!("../data/seat/seat-6.toml"),
    include_str!("../data/seat/seat-6b.toml"),
    include_str!("../data/seat/seat-7.toml"),
    include_str!("../data/seat/seat-7b.toml"),
    include_str!("../data/seat/seat-8.toml"),
    include_str!("../data/seat/seat-8b.toml"),
];

/// All shipped gender word pairs merged into one table.
pub fn default_pair_table(lowercase: bool) -> Result<WordPairTable, CdaError> {
    let mut table = WordPairTable::new();
    for (name, text) in PAIR_SOURCES {
        table.parse_tsv(text, name, lowercase)?;
    }
    Ok(table)
}

/// Male/female name pairs, in file order.
pub fn name_pairs() -> Vec<(String, String)> {
    PAIR_SOURCES[0]
        .1
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let mut cols = l.split('\t');
            Some((cols.next()?.to_string(), cols.next()?.to_string()))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfessionGroups {
    pub male: Vec<String>,
    pub female: Vec<String>,
    pub balanced: Vec<String>,
}

impl ProfessionGroups {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.male.iter().chain(&self.female).chain(&self.balanced)
    }
}

/// Person/profession templates. Placeholders are `<person>` and
/// `<profession>`; person pairs are `(male, female)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairTemplateSet {
    pub templates: Vec<String>,
    pub person_pairs: Vec<(String, String)>,
    pub professions: ProfessionGroups,
}

pub fn becpro_templates() -> PairTemplateSet {
    toml::from_str(BECPRO).expect("shipped template file parses")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordSet {
    pub name: String,
    pub words: Vec<String>,
}

/// An association test: target sets `x`, `y` and attribute sets `a`, `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeatSpec {
    pub label: String,
    pub a: WordSet,
    pub b: WordSet,
    pub x: WordSet,
    pub y: WordSet,
}

impl WeatSpec {
    pub fn sets(&self) -> [&WordSet; 4] {
        [&self.a, &self.b, &self.x, &self.y]
    }
}

pub fn seat_tests() -> Vec<WeatSpec> {
    SEAT_FILES
        .iter()
        .map(|t| toml::from_str(t).expect("shipped test file parses"))
        .collect()
}

/// Bleached sentence templates with a `<word>` slot.
pub fn seat_templates() -> Vec<String> {
    SEAT_TEMPLATES
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StereoKind {
    Intrasentence,
    Intersentence,
}

/// One probe: a context and three candidate completions. Intrasentence
/// contexts contain the literal token `BLANK`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoItem {
    pub kind: StereoKind,
    pub context: String,
    pub stereo: String,
    pub anti: String,
    pub meaningless: String,
}

pub fn parse_stereoset(text: &str) -> Result<Vec<StereoItem>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn stereoset_tiny() -> Vec<StereoItem> {
    parse_stereoset(STEREOSET).expect("shipped probe set parses")
}
