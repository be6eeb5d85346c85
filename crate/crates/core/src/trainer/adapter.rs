use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::EmbeddingVector;

/// Affine map `z -> W z + b` applied on top of frozen embeddings.
///
/// A fresh adapter is the identity, so the adapted model starts out equal
/// to the frozen one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasAdapter {
    dim: usize,
    /// Row-major `dim x dim`.
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl DebiasAdapter {
    pub fn identity(dim: usize, with_bias: bool) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weight,
            bias: with_bias.then(|| vec![0.0; dim]),
        }
    }

    pub fn from_parts(dim: usize, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("adapter dimension must be positive".into()));
        }
        if weight.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: weight.len(),
            });
        }
        if let Some(b) = &bias {
            if b.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: b.len(),
                });
            }
        }
        let all = weight.iter().chain(bias.iter().flatten());
        if let Some(index) = all.into_iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dim, weight, bias })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.dim * self.dim + if self.has_bias() { self.dim } else { 0 }
    }

    /// Weight entries followed by bias entries.
    pub fn params(&self) -> Vec<f64> {
        let mut out = self.weight.clone();
        if let Some(b) = &self.bias {
            out.extend_from_slice(b);
        }
        out
    }

    pub(crate) fn set_params(&mut self, params: &[f64]) {
        let n = self.dim * self.dim;
        self.weight.copy_from_slice(&params[..n]);
        if let Some(b) = &mut self.bias {
            b.copy_from_slice(&params[n..]);
        }
    }

    pub(crate) fn apply_slice(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out: Vec<f64> = self
            .weight
            .chunks_exact(d)
            .map(|row| row.iter().zip(z).map(|(w, x)| w * x).sum())
            .collect();
        if let Some(b) = &self.bias {
            for (o, bi) in out.iter_mut().zip(b) {
                *o += bi;
            }
        }
        out
    }

    pub fn apply(&self, z: &EmbeddingVector) -> Result<EmbeddingVector> {
        if z.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: z.dim(),
            });
        }
        EmbeddingVector::new(self.apply_slice(z.as_slice()))
    }
}

pub fn adapter_apply(adapter: &DebiasAdapter, z: &EmbeddingVector) -> Result<EmbeddingVector> {
    adapter.apply(z)
}
