//! Fairness audits: the CCED gap over content groups and the male ratio of
//! retrieval preferences.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::digest::{json_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::math::{norm, squared_distance, EmbeddingVector, GroupEmbeddings};
use crate::trainer::DebiasAdapter;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Differences in similarity below this count as a tie.
pub const TIE_EPSILON: f64 = 1e-12;

fn mapped(v: &EmbeddingVector, adapter: Option<&DebiasAdapter>) -> Result<EmbeddingVector> {
    match adapter {
        Some(a) => a.apply(v),
        None => Ok(v.clone()),
    }
}

/// Mean pairwise gap `|d_i - d_j|` of one group, where `d_i` is the
/// Euclidean distance from attribute `i` to the neutral embedding.
pub fn group_gap(group: &GroupEmbeddings, adapter: Option<&DebiasAdapter>) -> Result<f64> {
    if group.attributes.len() < 2 {
        return Err(Error::malformed(
            &group.content_id,
            format!("needs at least 2 attribute embeddings, found {}", group.attributes.len()),
        ));
    }
    let dim = adapter.map_or(group.dim(), |a| a.dim());
    group
        .check_dim(dim)
        .map_err(|e| Error::malformed(&group.content_id, e.to_string()))?;
    let neutral = mapped(&group.neutral, adapter)?;
    let d: Vec<f64> = group
        .attributes
        .iter()
        .map(|a| {
            let y = mapped(a, adapter)?;
            Ok(squared_distance(y.as_slice(), neutral.as_slice()).sqrt())
        })
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..d.len() {
        for j in i + 1..d.len() {
            sum += (d[i] - d[j]).abs();
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Average [`group_gap`] over all groups.
pub fn cced_gap(groups: &[GroupEmbeddings], adapter: Option<&DebiasAdapter>) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for g in groups {
        total += group_gap(g, adapter)?;
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    /// Negative Euclidean distance.
    Euclidean,
}

impl Similarity {
    pub fn score(self, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
        if a.dim() != b.dim() {
            return Err(Error::DimensionMismatch {
                expected: a.dim(),
                found: b.dim(),
            });
        }
        let (a, b) = (a.as_slice(), b.as_slice());
        match self {
            Similarity::Cosine => {
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return Err(Error::DegenerateVector);
                }
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                Ok(dot / (na * nb))
            }
            Similarity::Euclidean => Ok(-squared_distance(a, b).sqrt()),
        }
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Similarity::Cosine => "cosine",
            Similarity::Euclidean => "euclidean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preference {
    A,
    B,
    Tie,
}

pub fn retrieval_preference(
    query: &EmbeddingVector,
    doc_a: &EmbeddingVector,
    doc_b: &EmbeddingVector,
) -> Result<Preference> {
    retrieval_preference_with(Similarity::Cosine, query, doc_a, doc_b)
}

pub fn retrieval_preference_with(
    sim: Similarity,
    query: &EmbeddingVector,
    doc_a: &EmbeddingVector,
    doc_b: &EmbeddingVector,
) -> Result<Preference> {
    let delta = sim.score(query, doc_a)? - sim.score(query, doc_b)?;
    Ok(if delta.abs() < TIE_EPSILON {
        Preference::Tie
    } else if delta > 0.0 {
        Preference::A
    } else {
        Preference::B
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTriple {
    pub query: EmbeddingVector,
    pub male_doc: EmbeddingVector,
    pub female_doc: EmbeddingVector,
}

impl RetrievalTriple {
    /// The same query with the two documents swapped.
    pub fn mirrored(&self) -> Self {
        Self {
            query: self.query.clone(),
            male_doc: self.female_doc.clone(),
            female_doc: self.male_doc.clone(),
        }
    }
}

/// Exact preference counts of one category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub male_wins: usize,
    pub female_wins: usize,
    pub ties: usize,
}

impl CategoryCounts {
    pub fn queries(&self) -> usize {
        self.male_wins + self.female_wins + self.ties
    }

    /// `(male_wins + ties / 2) / queries`, evaluated on integers first.
    pub fn ratio(&self) -> f64 {
        (2 * self.male_wins + self.ties) as f64 / (2 * self.queries()) as f64
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            male_wins: self.male_wins + other.male_wins,
            female_wins: self.female_wins + other.female_wins,
            ties: self.ties + other.ties,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaleRatio {
    pub counts: IndexMap<String, CategoryCounts>,
    pub ratios: IndexMap<String, f64>,
    pub avg_dev: f64,
}

impl MaleRatio {
    pub fn from_counts(counts: IndexMap<String, CategoryCounts>) -> Result<Self> {
        if let Some((name, _)) = counts.iter().find(|(_, c)| c.queries() == 0) {
            return Err(Error::EmptyCategory(name.clone()));
        }
        let ratios: IndexMap<String, f64> =
            counts.iter().map(|(k, c)| (k.clone(), c.ratio())).collect();
        let avg_dev = avg_dev(ratios.values().copied());
        Ok(Self {
            counts,
            ratios,
            avg_dev,
        })
    }
}

/// Mean `|ratio - 0.5|`; 0 for no categories.
pub fn avg_dev(ratios: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = ratios
        .into_iter()
        .fold((0.0, 0usize), |(s, n), r| (s + (r - 0.5).abs(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn category_counts(
    triples: &[RetrievalTriple],
    sim: Similarity,
    adapter: Option<&DebiasAdapter>,
) -> Result<CategoryCounts> {
    let mut c = CategoryCounts::default();
    for t in triples {
        let q = mapped(&t.query, adapter)?;
        let m = mapped(&t.male_doc, adapter)?;
        let f = mapped(&t.female_doc, adapter)?;
        match retrieval_preference_with(sim, &q, &m, &f)? {
            Preference::A => c.male_wins += 1,
            Preference::B => c.female_wins += 1,
            Preference::Tie => c.ties += 1,
        }
    }
    Ok(c)
}

pub fn male_ratio(
    categories: &IndexMap<String, Vec<RetrievalTriple>>,
    sim: Similarity,
    adapter: Option<&DebiasAdapter>,
) -> Result<MaleRatio> {
    let mut counts = IndexMap::new();
    for (name, triples) in categories {
        if triples.is_empty() {
            return Err(Error::EmptyCategory(name.clone()));
        }
        counts.insert(name.clone(), category_counts(triples, sim, adapter)?);
    }
    MaleRatio::from_counts(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub groups: usize,
    pub retrieval_queries: usize,
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetrics {
    pub cced_gap: f64,
    pub ratios: IndexMap<String, f64>,
    pub category_counts: IndexMap<String, CategoryCounts>,
    pub avg_dev: f64,
    pub counts: ReportCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    /// Digest of the encoded checkpoint; absent when no adapter was applied.
    pub adapter_digest: Option<String>,
    pub groups_digest: String,
    pub retrieval_digest: String,
    pub similarity: Similarity,
    pub tie_rule: String,
    pub gap_pairing: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub schema_version: u32,
    pub metrics: ReportMetrics,
    pub provenance: ReportProvenance,
}

impl FairnessReport {
    /// `category,ratio,male_wins,female_wins,ties` rows.
    pub fn ratio_rows(&self) -> impl Iterator<Item = (&str, f64, CategoryCounts)> {
        self.metrics
            .ratios
            .iter()
            .map(|(k, r)| (k.as_str(), *r, self.metrics.category_counts[k]))
    }
}

pub fn build_report(
    groups: &[GroupEmbeddings],
    retrieval: &IndexMap<String, Vec<RetrievalTriple>>,
    adapter: Option<&DebiasAdapter>,
    sim: Similarity,
) -> Result<FairnessReport> {
    let gap = cced_gap(groups, adapter)?;
    let ratio = male_ratio(retrieval, sim, adapter)?;
    let queries = retrieval.values().map(Vec::len).sum();
    Ok(FairnessReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metrics: ReportMetrics {
            cced_gap: gap,
            ratios: ratio.ratios,
            category_counts: ratio.counts,
            avg_dev: ratio.avg_dev,
            counts: ReportCounts {
                groups: groups.len(),
                retrieval_queries: queries,
                categories: retrieval.len(),
            },
        },
        provenance: ReportProvenance {
            adapter_digest: adapter.map(|a| sha256_hex(crate::io::encode_adapter(a))),
            groups_digest: json_digest(groups),
            retrieval_digest: json_digest(retrieval),
            similarity: sim,
            tie_rule: format!("|delta| < {TIE_EPSILON:e} counts as half a win for each side"),
            gap_pairing: "mean over unordered attribute pairs".into(),
        },
    })
}
