//! Numeric kernel: Euclidean and Gaussian-kernel distances, kernel width
//! estimation, and the per-group conditional probabilities whose uniformity
//! is equivalent to equal sensitive-to-neutral distances.
//!
//! Everything here is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A fixed-dimension, finite embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter(
                "embedding must have at least one dimension".into(),
            ));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Width of the Gaussian manifold kernel, in distance units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    rho: f64,
}

impl KernelParams {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel width must be positive and finite, got {rho}"
            )));
        }
        Ok(Self { rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

/// How the kernel width is derived from the training distances.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum RhoMode {
    /// Population standard deviation of the distances.
    #[default]
    Std,
    /// Population variance of the distances.
    Variance,
    /// A hand-picked width; the data is ignored.
    Fixed(f64),
}

/// Embeddings of one content unit: one vector per sensitive attribute (in
/// lexicon order) plus the neutral version.
///
/// `neutral_original` is the neutral embedding under the frozen, unadapted
/// model. It is what the representation term anchors to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEmbeddings {
    pub content_id: String,
    pub attributes: Vec<EmbeddingVector>,
    pub neutral: EmbeddingVector,
    pub neutral_original: Option<EmbeddingVector>,
}

impl GroupEmbeddings {
    /// Builds a group whose original neutral embedding equals `neutral`,
    /// which is the case for embeddings straight out of a frozen encoder.
    pub fn new(
        content_id: impl Into<String>,
        attributes: Vec<EmbeddingVector>,
        neutral: EmbeddingVector,
    ) -> Self {
        Self {
            content_id: content_id.into(),
            attributes,
            neutral_original: Some(neutral.clone()),
            neutral,
        }
    }

    pub fn dim(&self) -> usize {
        self.neutral.dim()
    }

    /// Checks that every vector in the group shares one dimension.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        let vectors = self
            .attributes
            .iter()
            .chain(std::iter::once(&self.neutral))
            .chain(self.neutral_original.iter());
        for v in vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn check_same_dim(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

pub fn euclidean_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_same_dim(a, b)?;
    Ok(squared_distance(a.as_slice(), b.as_slice()).sqrt())
}

/// `exp(-|a-b|^2 / (2 rho^2))`: 1 at zero distance, decaying towards 0.
pub fn kernel_distance(a: &EmbeddingVector, b: &EmbeddingVector, k: KernelParams) -> Result<f64> {
    check_same_dim(a, b)?;
    Ok(kernel_from_squared(
        squared_distance(a.as_slice(), b.as_slice()),
        k.rho,
    ))
}

#[inline]
pub(crate) fn kernel_from_squared(sq: f64, rho: f64) -> f64 {
    (-sq / (2.0 * rho * rho)).exp()
}

/// Distances from each attribute embedding to the neutral embedding, for
/// every group. These are the only distances the debiasing loss looks at.
fn sensitive_to_neutral_distances(groups: &[GroupEmbeddings]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for g in groups {
        if g.attributes.is_empty() {
            return Err(Error::malformed(&g.content_id, "no attribute embeddings"));
        }
        for a in &g.attributes {
            out.push(euclidean_distance(a, &g.neutral)?);
        }
    }
    Ok(out)
}

/// Kernel width from the population standard deviation of all
/// sensitive-to-neutral distances.
pub fn estimate_rho(groups: &[GroupEmbeddings]) -> Result<KernelParams> {
    estimate_rho_with(groups, RhoMode::Std)
}

pub fn estimate_rho_with(groups: &[GroupEmbeddings], mode: RhoMode) -> Result<KernelParams> {
    if let RhoMode::Fixed(rho) = mode {
        return KernelParams::new(rho);
    }
    if groups.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let distances = sensitive_to_neutral_distances(groups)?;
    let n = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / n;
    let variance = distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    let std = variance.sqrt();
    // Degenerate spread (e.g. perfectly symmetric fixtures) falls back to
    // the mean distance, floored so the kernel stays well defined.
    if std < 1e-9 {
        return KernelParams::new(mean.max(1e-6));
    }
    match mode {
        RhoMode::Std => KernelParams::new(std),
        RhoMode::Variance => KernelParams::new(variance),
        RhoMode::Fixed(_) => unreachable!(),
    }
}

/// Probability of each attribute embedding given the neutral embedding,
/// under an isotropic Gaussian centred on the neutral one.
///
/// Evaluated in shifted log space so far-away groups do not underflow to
/// `0/0`; the result is the same normalized ratio of kernel values.
pub fn conditional_probabilities(group: &GroupEmbeddings, k: KernelParams) -> Result<Vec<f64>> {
    if group.attributes.len() < 2 {
        return Err(Error::Arity {
            needed: 2,
            found: group.attributes.len(),
        });
    }
    let scale = 2.0 * k.rho * k.rho;
    let mut exponents = Vec::with_capacity(group.attributes.len());
    for a in &group.attributes {
        check_same_dim(a, &group.neutral)?;
        exponents.push(squared_distance(a.as_slice(), group.neutral.as_slice()) / scale);
    }
    let min = exponents.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = exponents.iter().map(|e| (min - e).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}
