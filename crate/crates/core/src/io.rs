//! File formats: text records, group records, embedding stores, lexicons,
//! prompt stores and adapter checkpoints.
//!
//! Record files are JSON Lines. Blank lines are skipped, and every parse
//! failure reports the 1-based line it came from. Embeddings and adapters
//! use small little-endian binary layouts.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationResult, PolarityCheck, PromptStore};
use crate::error::{Error, Result};
use crate::lexicon::SensitiveLexicon;
use crate::math::{EmbeddingVector, GroupEmbeddings};
use crate::metrics::RetrievalTriple;
use crate::trainer::DebiasAdapter;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"FEMB";
pub const EMBEDDING_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FADP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Truncates and rewrites `path` while holding an exclusive advisory lock.
pub fn write_locked(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .map_err(labelled(path))?;
    file.lock()?;
    file.set_len(0)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    Ok(())
}

fn parse_error(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    }
}

/// Non-blank lines with their 1-based line numbers.
fn numbered_lines(input: &str) -> impl Iterator<Item = (usize, &str)> {
    input
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Parses JSON Lines from a string; `path` only labels errors.
pub fn parse_json_lines<T: DeserializeOwned>(input: &str, path: &Path) -> Result<Vec<T>> {
    numbered_lines(input)
        .map(|(n, line)| serde_json::from_str(line).map_err(|e| parse_error(path, n, e)))
        .collect()
}

pub fn read_json_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    parse_json_lines(&read_string(path)?, path)
}

pub fn to_json_lines<'a, T: Serialize + 'a>(items: impl IntoIterator<Item = &'a T>) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_json_lines<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    write_locked(path, to_json_lines(items)?.as_bytes())
}

fn to_pretty_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = read_string(path)?;
    serde_json::from_str(&raw).map_err(|e| parse_error(path, e.line(), e))
}

// ---------------------------------------------------------------------------
// text records

/// One input text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

pub fn parse_text_records(input: &str, path: &Path) -> Result<Vec<TextRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in numbered_lines(input) {
        let record: TextRecord = serde_json::from_str(line).map_err(|e| parse_error(path, n, e))?;
        if record.text.trim().is_empty() {
            return Err(parse_error(path, n, "text is empty"));
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: n,
                id: record.id,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_text_records(path: &Path) -> Result<Vec<TextRecord>> {
    parse_text_records(&read_string(path)?, path)
}

pub fn write_text_records(path: &Path, records: &[TextRecord]) -> Result<()> {
    write_json_lines(path, records)
}

// ---------------------------------------------------------------------------
// group records

/// Augmented groups plus the attribute list declared on the header line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsFile {
    pub attributes: Vec<String>,
    pub records: Vec<AugmentationResult>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupsHeader {
    attributes: Vec<String>,
}

#[derive(Deserialize)]
struct RawGroup {
    content_id: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    groups: IndexMap<String, String>,
    neutral: Option<String>,
    confidence: Option<f64>,
    round: Option<u32>,
    #[serde(default)]
    polarity: Option<PolarityCheck>,
}

impl GroupsFile {
    pub fn new(attributes: Vec<String>, records: Vec<AugmentationResult>) -> Self {
        Self {
            attributes,
            records,
        }
    }

    /// Records whose confidence was missing on disk.
    pub fn defaulted_confidence(&self) -> impl Iterator<Item = &AugmentationResult> {
        self.records.iter().filter(|r| r.confidence_defaulted)
    }

    pub fn to_json_lines(&self) -> Result<String> {
        let header = GroupsHeader {
            attributes: self.attributes.clone(),
        };
        let mut out = to_json_lines([&header])?;
        out.push_str(&to_json_lines(&self.records)?);
        Ok(out)
    }
}

pub fn parse_groups(input: &str, path: &Path) -> Result<GroupsFile> {
    let mut lines = numbered_lines(input);
    let header_mismatch = |line, message: &str| Error::HeaderMismatch {
        path: path.to_path_buf(),
        line,
        message: message.to_string(),
    };
    let Some((n, first)) = lines.next() else {
        return Err(header_mismatch(1, "missing header line"));
    };
    let header: GroupsHeader = serde_json::from_str(first)
        .map_err(|_| header_mismatch(n, "first line must be {\"attributes\": [...]}"))?;
    let attributes = header.attributes;
    if attributes.len() < 2 {
        return Err(header_mismatch(n, "header must declare at least two attributes"));
    }

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (n, line) in lines {
        let raw: RawGroup = serde_json::from_str(line).map_err(|e| parse_error(path, n, e))?;
        let at_line = |reason: String| {
            Error::malformed(&raw.content_id, format!("{}:{n}: {reason}", path.display()))
        };
        if let Some(extra) = raw.groups.keys().find(|k| !attributes.contains(k)) {
            return Err(header_mismatch(
                n,
                &format!("attribute {extra:?} is not declared in the header"),
            ));
        }
        let mut group_texts = IndexMap::new();
        for attr in &attributes {
            let text = raw
                .groups
                .get(attr)
                .ok_or_else(|| at_line(format!("missing attribute {attr:?}")))?;
            group_texts.insert(attr.clone(), text.clone());
        }
        let neutral_text = raw.neutral.clone().ok_or_else(|| at_line("missing neutral".into()))?;
        let confidence = raw.confidence.unwrap_or(1.0);
        if !(0.0..=1.0).contains(&confidence) {
            return Err(at_line(format!("confidence {confidence} outside [0, 1]")));
        }
        if !seen.insert(raw.content_id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line: n,
                id: raw.content_id,
            });
        }
        if raw.confidence.is_none() {
            log::warn!("{}:{n}: confidence missing, defaulting to 1.0", path.display());
        }
        records.push(AugmentationResult {
            content_id: raw.content_id,
            source_text: raw.source,
            group_texts,
            neutral_text,
            confidence,
            round: raw.round.unwrap_or(1),
            polarity: raw.polarity,
            confidence_defaulted: raw.confidence.is_none(),
        });
    }
    Ok(GroupsFile {
        attributes,
        records,
    })
}

pub fn load_groups(path: &Path) -> Result<GroupsFile> {
    parse_groups(&read_string(path)?, path)
}

pub fn write_groups(path: &Path, groups: &GroupsFile) -> Result<()> {
    write_locked(path, groups.to_json_lines()?.as_bytes())
}

// ---------------------------------------------------------------------------
// embeddings

/// Vectors keyed by id, all of one dimension.
///
/// Group embeddings use the keys `<content_id>:<attribute>` and
/// `<content_id>:neutral`, with an optional `<content_id>:neutral_original`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: IndexMap<String, EmbeddingVector>,
}

/// Cursor over a byte slice that reports where it ran out.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after offset {}",
                self.bytes.len() - self.pos,
                self.pos
            )));
        }
        Ok(())
    }
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > u32::MAX as usize {
            return Err(Error::InvalidParameter(format!("unsupported dimension {dim}")));
        }
        Ok(Self {
            dim,
            entries: IndexMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds or replaces an entry.
    pub fn insert(&mut self, id: impl Into<String>, v: EmbeddingVector) -> Result<()> {
        let id = id.into();
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: v.dim(),
            });
        }
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "id of {} bytes exceeds the 65535 byte limit",
                id.len()
            )));
        }
        self.entries.insert(id, v);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(20 + self.len() * (2 + 16 + 4 * self.dim));
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for (i, &x) in v.as_slice().iter().enumerate() {
                let narrow = x as f32;
                if !narrow.is_finite() {
                    return Err(Error::Format(format!(
                        "entry {id:?} component {i} ({x}) does not fit in 32 bits"
                    )));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", String::from_utf8_lossy(magic))));
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut store = Self::new(dim)?;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let at = r.pos;
            let id = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format(format!("id at offset {at} is not UTF-8")))?
                .to_string();
            let at = r.pos;
            let values = (0..dim)
                .map(|_| r.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?;
            let v = EmbeddingVector::new(values)
                .map_err(|_| Error::Format(format!("non-finite vector at offset {at}")))?;
            if store.entries.contains_key(&id) {
                return Err(Error::Format(format!("duplicate id {id:?}")));
            }
            store.entries.insert(id, v);
        }
        r.finish()?;
        Ok(store)
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::decode(&read_bytes(path)?)
}

pub fn write_embeddings(store: &EmbeddingStore, path: &Path) -> Result<()> {
    write_locked(path, &store.encode()?)
}

pub fn embedding_key(content_id: &str, slot: &str) -> String {
    format!("{content_id}:{slot}")
}

/// Looks up the embeddings of every group, in header attribute order.
pub fn assemble_group_embeddings(
    groups: &GroupsFile,
    store: &EmbeddingStore,
) -> Result<Vec<GroupEmbeddings>> {
    groups
        .records
        .iter()
        .map(|g| {
            let id = &g.content_id;
            let fetch = |slot: &str| {
                let key = embedding_key(id, slot);
                store
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::malformed(id, format!("no embedding for {key:?}")))
            };
            let attributes = groups
                .attributes
                .iter()
                .map(|a| fetch(a))
                .collect::<Result<Vec<_>>>()?;
            let neutral = fetch("neutral")?;
            let original = store
                .get(&embedding_key(id, "neutral_original"))
                .cloned()
                .unwrap_or_else(|| neutral.clone());
            Ok(GroupEmbeddings {
                content_id: id.clone(),
                attributes,
                neutral,
                neutral_original: Some(original),
            })
        })
        .collect()
}

/// Inverse of [`assemble_group_embeddings`] for an attribute list.
pub fn store_group_embeddings(
    groups: &[GroupEmbeddings],
    attributes: &[String],
) -> Result<EmbeddingStore> {
    let first = groups.first().ok_or(Error::EmptyDataset)?;
    let mut store = EmbeddingStore::new(first.dim())?;
    for g in groups {
        if g.attributes.len() != attributes.len() {
            return Err(Error::malformed(&g.content_id, "attribute count differs from the list"));
        }
        for (a, v) in attributes.iter().zip(&g.attributes) {
            store.insert(embedding_key(&g.content_id, a), v.clone())?;
        }
        store.insert(embedding_key(&g.content_id, "neutral"), g.neutral.clone())?;
        if let Some(orig) = g.neutral_original.as_ref().filter(|o| *o != &g.neutral) {
            store.insert(embedding_key(&g.content_id, "neutral_original"), orig.clone())?;
        }
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// retrieval

/// One retrieval query; the three fields are embedding ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub category: String,
    pub query: String,
    pub male: String,
    pub female: String,
}

pub fn load_retrieval(path: &Path) -> Result<Vec<RetrievalRecord>> {
    read_json_lines(path)
}

/// Resolves ids against `store` and groups queries by category in file order.
pub fn resolve_retrieval(
    records: &[RetrievalRecord],
    store: &EmbeddingStore,
) -> Result<IndexMap<String, Vec<RetrievalTriple>>> {
    let fetch = |id: &str| {
        store
            .get(id)
            .cloned()
            .ok_or_else(|| Error::Format(format!("retrieval id {id:?} has no embedding")))
    };
    let mut out: IndexMap<String, Vec<RetrievalTriple>> = IndexMap::new();
    for r in records {
        out.entry(r.category.clone()).or_default().push(RetrievalTriple {
            query: fetch(&r.query)?,
            male_doc: fetch(&r.male)?,
            female_doc: fetch(&r.female)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// lexicons and prompt stores

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LexiconFile {
    attributes: IndexMap<String, Vec<String>>,
}

/// Parses `{"attributes": {"<name>": ["word", "multi word", ...], ...}}`.
pub fn parse_lexicon(input: &str) -> Result<SensitiveLexicon> {
    let file: LexiconFile =
        serde_json::from_str(input).map_err(|e| Error::Lexicon(e.to_string()))?;
    SensitiveLexicon::new(file.attributes)
}

pub fn lexicon_to_json(lex: &SensitiveLexicon) -> Result<String> {
    to_pretty_json(&LexiconFile {
        attributes: lex.word_lists(),
    })
}

pub fn load_lexicon(path: &Path) -> Result<SensitiveLexicon> {
    parse_lexicon(&read_string(path)?)
}

pub fn save_lexicon(path: &Path, lex: &SensitiveLexicon) -> Result<()> {
    write_locked(path, lexicon_to_json(lex)?.as_bytes())
}

pub fn load_prompt_store(path: &Path) -> Result<PromptStore> {
    read_json(path)
}

pub fn save_prompt_store(path: &Path, store: &PromptStore) -> Result<()> {
    write_locked(path, to_pretty_json(store)?.as_bytes())
}

// ---------------------------------------------------------------------------
// checkpoints

/// Sidecar metadata stored next to a checkpoint as `<path>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub beta: f64,
    pub rho: f64,
    pub step: usize,
    pub validation_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

pub fn encode_adapter(adapter: &DebiasAdapter) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * adapter.param_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(adapter.dim() as u32).to_le_bytes());
    out.push(adapter.has_bias() as u8);
    for x in adapter.params() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_adapter(bytes: &[u8]) -> Result<DebiasAdapter> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = r.u32()? as usize;
    let with_bias = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bias flag must be 0 or 1, found {other}"))),
    };
    let weight = (0..dim * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let bias = if with_bias {
        Some((0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    r.finish()?;
    DebiasAdapter::from_parts(dim, weight, bias)
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_checkpoint(path: &Path, adapter: &DebiasAdapter, meta: &CheckpointMeta) -> Result<()> {
    write_locked(path, &encode_adapter(adapter))?;
    write_locked(&meta_path(path), to_pretty_json(meta)?.as_bytes())
}

/// Reads a checkpoint and, when present, its sidecar metadata.
pub fn read_checkpoint(path: &Path) -> Result<(DebiasAdapter, Option<CheckpointMeta>)> {
    let adapter = decode_adapter(&read_bytes(path)?)?;
    let meta = meta_path(path);
    let meta = if meta.exists() {
        Some(read_json(&meta)?)
    } else {
        None
    };
    Ok((adapter, meta))
}

fn labelled(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Opens a file for reading, labelling a missing file with its path.
pub fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(labelled(path))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(labelled(path))
}

fn read_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(labelled(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("t.jsonl")
    }

    #[test]
    fn text_records_in_order() {
        let input = "{\"id\":\"a\",\"text\":\"x\"}\n\n{\"id\":\"b\",\"text\":\"y\",\"source\":\"s\"}\n{\"id\":\"c\",\"text\":\"z\"}\n";
        let recs = parse_text_records(input, p()).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(recs[1].source.as_deref(), Some("s"));
        assert!(parse_text_records("", p()).unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_names_the_line() {
        let input = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n";
        match parse_text_records(input, p()) {
            Err(Error::DuplicateId { line, id, .. }) => assert_eq!((line, id.as_str()), (2, "a")),
            other => panic!("{other:?}"),
        }
        match parse_text_records("{\"id\":\"a\",\"text\":\"x\"}\nnope\n", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    const HEADER: &str = "{\"attributes\":[\"male\",\"female\"]}\n";

    #[test]
    fn groups_accept_and_default() {
        let input = format!(
            "{HEADER}{{\"content_id\":\"g\",\"groups\":{{\"female\":\"she\",\"male\":\"he\"}},\"neutral\":\"they\"}}\n"
        );
        let file = parse_groups(&input, p()).unwrap();
        let g = &file.records[0];
        assert_eq!(g.confidence, 1.0);
        assert!(g.confidence_defaulted);
        assert_eq!(g.round, 1);
        // reordered to header order
        assert_eq!(g.group_texts.keys().collect::<Vec<_>>(), ["male", "female"]);
    }

    #[test]
    fn groups_errors() {
        let missing_neutral =
            format!("{HEADER}{{\"content_id\":\"g\",\"groups\":{{\"male\":\"he\",\"female\":\"she\"}}}}\n");
        assert!(matches!(parse_groups(&missing_neutral, p()), Err(Error::MalformedGroup { .. })));

        let missing_attr = format!("{HEADER}{{\"content_id\":\"g\",\"groups\":{{\"male\":\"he\"}},\"neutral\":\"x\"}}\n");
        assert!(matches!(parse_groups(&missing_attr, p()), Err(Error::MalformedGroup { .. })));

        let extra = format!(
            "{HEADER}{{\"content_id\":\"g\",\"groups\":{{\"male\":\"a\",\"female\":\"b\",\"other\":\"c\"}},\"neutral\":\"x\"}}\n"
        );
        assert!(matches!(parse_groups(&extra, p()), Err(Error::HeaderMismatch { line: 2, .. })));

        let no_header = "{\"content_id\":\"g\",\"groups\":{},\"neutral\":\"x\"}\n";
        assert!(matches!(parse_groups(no_header, p()), Err(Error::HeaderMismatch { line: 1, .. })));
        assert!(matches!(parse_groups("", p()), Err(Error::HeaderMismatch { .. })));
    }

    fn sample_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.insert("a", EmbeddingVector::new(vec![1.0, -0.5]).unwrap()).unwrap();
        s.insert("é", EmbeddingVector::new(vec![0.25, 3.0]).unwrap()).unwrap();
        s
    }

    #[test]
    fn embedding_bytes_are_exact() {
        let mut s = EmbeddingStore::new(1).unwrap();
        s.insert("x", EmbeddingVector::new(vec![1.0]).unwrap()).unwrap();
        let bytes = s.encode().unwrap();
        let expected: Vec<u8> = [
            &b"FEMB"[..],
            &[1, 0, 0, 0],
            &[1, 0, 0, 0],
            &[1, 0, 0, 0, 0, 0, 0, 0],
            &[1, 0],
            b"x",
            &[0x00, 0x00, 0x80, 0x3f],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn embedding_round_trip_and_errors() {
        let s = sample_store();
        let bytes = s.encode().unwrap();
        assert_eq!(EmbeddingStore::decode(&bytes).unwrap(), s);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingStore::decode(&bad), Err(Error::Format(_))));

        let mut longer = bytes.clone();
        longer[12] = 3; // claims three entries
        assert!(matches!(
            EmbeddingStore::decode(&longer),
            Err(Error::Truncated { offset }) if offset == bytes.len() as u64
        ));

        let mut trailing = bytes;
        trailing.push(0);
        assert!(matches!(EmbeddingStore::decode(&trailing), Err(Error::Format(_))));
    }

    #[test]
    fn oversized_values_rejected() {
        let mut s = EmbeddingStore::new(1).unwrap();
        s.insert("x", EmbeddingVector::new(vec![1e300]).unwrap()).unwrap();
        assert!(matches!(s.encode(), Err(Error::Format(_))));
    }

    #[test]
    fn adapter_round_trip() {
        let a = DebiasAdapter::from_parts(2, vec![1.0, 0.5, -0.25, 2.0], Some(vec![0.1, 0.2])).unwrap();
        let bytes = encode_adapter(&a);
        assert_eq!(bytes.len(), 13 + 6 * 8);
        assert_eq!(decode_adapter(&bytes).unwrap(), a);
        assert!(decode_adapter(&bytes[..20]).is_err());
    }

    #[test]
    fn lexicon_round_trip() {
        let lex = SensitiveLexicon::default_english();
        assert_eq!(parse_lexicon(&lexicon_to_json(&lex).unwrap()).unwrap(), lex);
        assert!(matches!(parse_lexicon("{\"attributes\":{\"a\":[\"x\"]}}"), Err(Error::Lexicon(_))));
    }
}
