//! Debiasing toolkit for frozen text embeddings.
//!
//! The pieces, roughly in pipeline order:
//!
//! - [`lexicon`] labels texts by counting sensitive words.
//! - [`augment`] rewrites texts into one version per group plus a neutral
//!   version with an LLM, and grows its few-shot prompt from corrected
//!   mistakes.
//! - [`trainer`] fits an affine adapter on top of frozen embeddings so that
//!   every group sits at the same kernel distance from the neutral text.
//! - [`metrics`] audits the result.
//! - [`io`] holds the file formats.

pub mod augment;
pub mod digest;
pub mod error;
pub mod io;
pub mod lexicon;
pub mod math;
pub mod metrics;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
pub use lexicon::{PolarityLabel, SensitiveLexicon};
pub use math::{EmbeddingVector, GroupEmbeddings, KernelParams, RhoMode};
pub use trainer::{train, DebiasAdapter, TrainConfig};
