//! Word-list polarity: which sensitive group a text belongs to, judged by
//! counting lexicon entries, and the union accuracy of augmented groups.

use std::collections::HashMap;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationResult;
use crate::error::{Error, Result};

const DEFAULT_LEXICON: &str = include_str!("../data/default_lexicon.json");

/// Names that would collide with the non-attribute polarity outcomes.
const RESERVED_NAMES: [&str; 2] = ["neutral", "ambiguous"];

/// A token with its byte span in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on every maximal run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_spans(text).into_iter().map(|t| t.text).collect()
}

pub fn tokenize_with_spans(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                tokens.push(make_token(text, s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        tokens.push(make_token(text, s, text.len()));
    }
    tokens
}

fn make_token(text: &str, start: usize, end: usize) -> Token {
    Token {
        text: text[start..end].to_lowercase(),
        start,
        end,
    }
}

/// Lexicon entries indexed by first token, longest entries first.
#[derive(Debug, Clone, Default)]
struct EntryIndex {
    by_first: HashMap<String, Vec<Vec<String>>>,
}

impl EntryIndex {
    fn build<'a>(entries: impl IntoIterator<Item = &'a Vec<String>>) -> Self {
        let mut by_first: HashMap<String, Vec<Vec<String>>> = HashMap::new();
        for e in entries {
            if let Some(first) = e.first() {
                by_first.entry(first.clone()).or_default().push(e.clone());
            }
        }
        for list in by_first.values_mut() {
            list.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
            list.dedup();
        }
        Self { by_first }
    }

    /// Length of the longest entry matching `tokens` at `pos`.
    fn longest_at(&self, tokens: &[String], pos: usize) -> Option<(usize, &Vec<String>)> {
        self.by_first.get(&tokens[pos])?.iter().find_map(|entry| {
            let end = pos + entry.len();
            (end <= tokens.len() && tokens[pos..end] == entry[..]).then_some((entry.len(), entry))
        })
    }

    fn count(&self, tokens: &[String]) -> usize {
        let mut count = 0;
        let mut pos = 0;
        while pos < tokens.len() {
            match self.longest_at(tokens, pos) {
                Some((len, _)) => {
                    count += 1;
                    pos += len;
                }
                None => pos += 1,
            }
        }
        count
    }
}

/// Counts non-overlapping occurrences of `entries` in `text`, scanning left to
/// right and preferring the longest entry at each position.
pub fn occurrence_count(text: &str, entries: &[Vec<String>]) -> usize {
    EntryIndex::build(entries).count(&tokenize(text))
}

/// Outcome of the polarity check for one text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "snake_case")]
pub enum PolarityLabel {
    Attribute(String),
    Neutral,
    Ambiguous,
}

impl PolarityLabel {
    pub fn is_attribute(&self, name: &str) -> bool {
        matches!(self, PolarityLabel::Attribute(a) if a == name)
    }
}

impl fmt::Display for PolarityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolarityLabel::Attribute(name) => f.write_str(name),
            PolarityLabel::Neutral => f.write_str("neutral"),
            PolarityLabel::Ambiguous => f.write_str("ambiguous"),
        }
    }
}

/// A lexicon hit inside a text, for highlighting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconMatch {
    pub attribute: String,
    /// Byte offsets into the original text.
    pub start: usize,
    pub end: usize,
}

/// Per-attribute sensitive word lists.
#[derive(Debug, Clone)]
pub struct SensitiveLexicon {
    attributes: Vec<String>,
    /// Normalized entries per attribute, in file order.
    entries: Vec<Vec<Vec<String>>>,
    indexes: Vec<EntryIndex>,
    combined: EntryIndex,
    owner: HashMap<Vec<String>, usize>,
}

impl PartialEq for SensitiveLexicon {
    fn eq(&self, other: &Self) -> bool {
        self.attributes == other.attributes && self.entries == other.entries
    }
}

impl SensitiveLexicon {
    /// Builds a lexicon from `(attribute, entries)` pairs. Entries are
    /// lowercase words or space-separated phrases.
    pub fn new<I, S>(word_lists: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<String>)>,
        S: Into<String>,
    {
        let mut attributes: Vec<String> = Vec::new();
        let mut entries: Vec<Vec<Vec<String>>> = Vec::new();
        let mut owner: HashMap<Vec<String>, usize> = HashMap::new();
        for (name, words) in word_lists {
            let name = name.into();
            if name.is_empty() || RESERVED_NAMES.contains(&name.as_str()) {
                return Err(Error::Lexicon(format!("invalid attribute name {name:?}")));
            }
            if attributes.contains(&name) {
                return Err(Error::Lexicon(format!("duplicate attribute {name:?}")));
            }
            let idx = attributes.len();
            let mut list = Vec::with_capacity(words.len());
            for word in words {
                let entry = normalize_entry(&word)?;
                match owner.get(&entry) {
                    Some(&other) if other != idx => {
                        return Err(Error::Lexicon(format!(
                            "entry {word:?} listed under both {:?} and {name:?}",
                            attributes[other]
                        )))
                    }
                    Some(_) => continue,
                    None => {
                        owner.insert(entry.clone(), idx);
                        list.push(entry);
                    }
                }
            }
            attributes.push(name);
            entries.push(list);
        }
        if attributes.len() < 2 {
            return Err(Error::Lexicon(format!(
                "need at least 2 attributes, found {}",
                attributes.len()
            )));
        }
        let indexes = entries.iter().map(EntryIndex::build).collect();
        let combined = EntryIndex::build(entries.iter().flatten());
        Ok(Self {
            attributes,
            entries,
            indexes,
            combined,
            owner,
        })
    }

    /// The bundled English gender lexicon (`male`, `female`).
    pub fn default_english() -> Self {
        crate::io::parse_lexicon(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn attributes(&self) -> &[String] {
        &self.attributes
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    /// Entries of one attribute as token sequences.
    pub fn entries(&self, attribute: &str) -> Option<&[Vec<String>]> {
        self.attribute_index(attribute).map(|i| &self.entries[i][..])
    }

    /// Word lists in their space-joined file form.
    pub fn word_lists(&self) -> IndexMap<String, Vec<String>> {
        self.attributes
            .iter()
            .zip(&self.entries)
            .map(|(a, list)| (a.clone(), list.iter().map(|e| e.join(" ")).collect()))
            .collect()
    }

    /// Returns a copy with one more entry under `attribute`.
    pub fn with_entry(&self, attribute: &str, entry: &str) -> Result<Self> {
        let mut lists = self.word_lists();
        lists
            .get_mut(attribute)
            .ok_or_else(|| Error::Lexicon(format!("unknown attribute {attribute:?}")))?
            .push(entry.to_string());
        Self::new(lists)
    }

    /// Occurrence count of every attribute's entries, in attribute order.
    pub fn counts(&self, text: &str) -> Vec<usize> {
        let tokens = tokenize(text);
        self.indexes.iter().map(|ix| ix.count(&tokens)).collect()
    }

    pub fn polarity(&self, text: &str) -> PolarityLabel {
        label_from_counts(&self.counts(text), &self.attributes)
    }

    /// Lexicon hits across all attributes, longest-first, left to right.
    pub fn find_matches(&self, text: &str) -> Vec<LexiconMatch> {
        let spans = tokenize_with_spans(text);
        let tokens: Vec<String> = spans.iter().map(|t| t.text.clone()).collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < tokens.len() {
            match self.combined.longest_at(&tokens, pos) {
                Some((len, entry)) => {
                    out.push(LexiconMatch {
                        attribute: self.attributes[self.owner[entry]].clone(),
                        start: spans[pos].start,
                        end: spans[pos + len - 1].end,
                    });
                    pos += len;
                }
                None => pos += 1,
            }
        }
        out
    }
}

fn normalize_entry(word: &str) -> Result<Vec<String>> {
    if word.to_lowercase() != word {
        return Err(Error::Lexicon(format!("entry {word:?} is not lowercase")));
    }
    let tokens = tokenize(word);
    if tokens.is_empty() {
        return Err(Error::Lexicon(format!("entry {word:?} has no tokens")));
    }
    Ok(tokens)
}

/// Neutral when nothing matched, the attribute with the strict maximum
/// otherwise, ambiguous on a tie at a nonzero maximum.
pub fn label_from_counts(counts: &[usize], attributes: &[String]) -> PolarityLabel {
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return PolarityLabel::Neutral;
    }
    let mut winners = counts.iter().enumerate().filter(|(_, c)| **c == max);
    match (winners.next(), winners.next()) {
        (Some((i, _)), None) => PolarityLabel::Attribute(attributes[i].clone()),
        _ => PolarityLabel::Ambiguous,
    }
}

pub fn polarity(text: &str, lex: &SensitiveLexicon) -> PolarityLabel {
    lex.polarity(text)
}

/// True when the neutral text labels neutral and every attribute text labels
/// exactly its own attribute.
pub fn group_is_correct(group: &AugmentationResult, lex: &SensitiveLexicon) -> Result<bool> {
    if lex.polarity(&group.neutral_text) != PolarityLabel::Neutral {
        return Ok(false);
    }
    for attr in lex.attributes() {
        let text = group.group_texts.get(attr).ok_or_else(|| {
            Error::malformed(&group.content_id, format!("missing {attr:?} text"))
        })?;
        if !lex.polarity(text).is_attribute(attr) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Fraction of groups whose texts all carry their intended polarity.
/// An empty input scores 0.
pub fn union_accuracy(groups: &[AugmentationResult], lex: &SensitiveLexicon) -> Result<f64> {
    // validate everything first so a malformed group is never masked by an
    // earlier short-circuit
    for g in groups {
        for attr in lex.attributes() {
            if !g.group_texts.contains_key(attr) {
                return Err(Error::malformed(&g.content_id, format!("missing {attr:?} text")));
            }
        }
    }
    if groups.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for g in groups {
        if group_is_correct(g, lex)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / groups.len() as f64)
}
