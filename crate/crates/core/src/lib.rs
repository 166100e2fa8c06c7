//! Cross-model compatible ensembles for asymmetric retrieval.
//!
//! The crate builds a small, fully deterministic pipeline:
//!
//! 1. [`synthworld`] generates a shared latent world and a roster of
//!    mutually incompatible embedding models over it.
//! 2. [`transform`] trains residual bottleneck transformation networks that
//!    map each gallery model's space into a chosen query model's space.
//! 3. [`ensemble`] fuses the transformed gallery embeddings of one item
//!    across models and scores the ensemble's per-item uncertainty.
//! 4. [`evalproto`] evaluates retrieval quality (verification, open-set
//!    search, recall) and risk-coverage behaviour of the fused gallery.
//!
//! Everything downstream of a seed is reproducible byte-for-byte, including
//! across thread counts.

pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod evalproto;
pub mod format;
pub mod mat;
pub mod seedmix;
pub mod synthworld;
pub mod transform;

pub use embedding::{
    aggregate_template, cosine_similarity, distance, l2_normalize, DistanceMetric, EmbeddingItem,
    EmbeddingSet, EmbeddingVector, Template, EPS_NORM,
};
pub use error::{Error, Result};
