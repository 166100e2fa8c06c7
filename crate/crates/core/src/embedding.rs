//! Embedding vector/set types, distances, normalization and template
//! aggregation.
//!
//! Conventions used throughout the crate: similarity is the cosine of the
//! angle between vectors (higher is better), distance is `1 - similarity`,
//! and scoring always happens on L2-normalized vectors. Raw (un-normalized)
//! means are ranking-equivalent to normalized means under cosine scoring,
//! so both views are kept where fusion needs them.

use serde::{Deserialize, Serialize};
use std::collections::HashSet;

use crate::error::{Error, Result};

/// Norm threshold below which a vector is considered degenerate.
pub const EPS_NORM: f64 = 1e-9;

/// A fixed-dimension real vector. Coordinates are finite and `dim >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid_config(format!(
                "embedding dim must be >= 2, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid_config(
                "embedding coordinates must be finite",
            ));
        }
        Ok(Self { values })
    }

    /// Construct without validation. Caller guarantees invariants.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2 && values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Round every coordinate to `f32` precision (the storage precision of
    /// the binary set format). Vectors produced by generators and fusion are
    /// quantized like this so that file round-trips are bit-exact and
    /// in-memory evaluation agrees with evaluation on re-read artifacts.
    pub fn quantize_f32(&self) -> Self {
        Self {
            values: self.values.iter().map(|&v| (v as f32) as f64).collect(),
        }
    }
}

/// Unit-normalize `v`; fails with `DegenerateVector` near the zero vector.
pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = v.norm();
    if norm <= EPS_NORM {
        return Err(Error::DegenerateVector {
            norm,
            eps: EPS_NORM,
        });
    }
    Ok(EmbeddingVector::from_raw(
        v.values.iter().map(|x| x / norm).collect(),
    ))
}

/// Distance metrics used for scoring and uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    /// `1 - cos(a, b)`, in `[0, 2]`. Requires non-degenerate inputs.
    CosineDistance,
    /// `||a - b||`.
    Euclidean,
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Cosine of the angle between `a` and `b` (the similarity score used by all
/// evaluation protocols; higher is better).
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let an = l2_normalize(a)?;
    let bn = l2_normalize(b)?;
    Ok(dot(an.values(), bn.values()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distance between two vectors under `metric`.
pub fn distance(metric: DistanceMetric, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    match metric {
        DistanceMetric::CosineDistance => Ok(1.0 - cosine_similarity(a, b)?),
        DistanceMetric::Euclidean => {
            check_dims(a, b)?;
            Ok(a.values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt())
        }
    }
}

/// One or more embeddings of a single class, pooled into one vector.
#[derive(Debug, Clone)]
pub struct Template {
    pub class_label: u32,
    pub member_vectors: Vec<EmbeddingVector>,
}

impl Template {
    pub fn new(class_label: u32, member_vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if member_vectors.is_empty() {
            return Err(Error::invalid_config("template needs at least one member"));
        }
        let dim = member_vectors[0].dim();
        for m in &member_vectors {
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim(),
                });
            }
        }
        Ok(Self {
            class_label,
            member_vectors,
        })
    }
}

/// Coordinate-wise mean of the members, then unit-normalized.
pub fn aggregate_template(t: &Template) -> Result<EmbeddingVector> {
    let dim = t.member_vectors[0].dim();
    let n = t.member_vectors.len() as f64;
    let mut mean = vec![0.0; dim];
    for m in &t.member_vectors {
        for (acc, v) in mean.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= n;
    }
    l2_normalize(&EmbeddingVector::from_raw(mean))
}

/// One labeled embedding. `item_id` identifies the underlying sample and is
/// shared across models that embedded the same sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingItem {
    pub item_id: u32,
    pub class_label: u32,
    pub vector: EmbeddingVector,
}

/// Labeled collection of same-dimension vectors produced by one model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    model_id: String,
    dim: usize,
    items: Vec<EmbeddingItem>,
    seen_ids: HashSet<u32>,
}

impl EmbeddingSet {
    pub fn new(model_id: impl Into<String>, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid_config(format!(
                "set dim must be >= 2, got {dim}"
            )));
        }
        Ok(Self {
            model_id: model_id.into(),
            dim,
            items: Vec::new(),
            seen_ids: HashSet::new(),
        })
    }

    pub fn push(&mut self, item: EmbeddingItem) -> Result<()> {
        if item.vector.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: item.vector.dim(),
            });
        }
        if !self.seen_ids.insert(item.item_id) {
            return Err(Error::invalid_config(format!(
                "duplicate item_id {} in set {}",
                item.item_id, self.model_id
            )));
        }
        self.items.push(item);
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn items(&self) -> &[EmbeddingItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(vals: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(vals.to_vec()).unwrap()
    }

    #[test]
    fn normalize_pythagorean_triple() {
        let v = l2_normalize(&ev(&[3.0, 4.0])).unwrap();
        assert_eq!(v.values(), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_axis_aligned() {
        let v = l2_normalize(&ev(&[0.0, 5.0])).unwrap();
        assert_eq!(v.values(), &[0.0, 1.0]);
    }

    #[test]
    fn normalize_zero_vector_is_degenerate() {
        let err = l2_normalize(&ev(&[0.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { .. }));
    }

    #[test]
    fn normalize_yields_unit_norm() {
        let v = l2_normalize(&ev(&[0.3, -1.7, 2.4, 0.001])).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_distance_examples() {
        let m = DistanceMetric::CosineDistance;
        assert_eq!(distance(m, &ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(distance(m, &ev(&[1.0, 0.0]), &ev(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(
            distance(m, &ev(&[1.0, 0.0]), &ev(&[-1.0, 0.0])).unwrap(),
            2.0
        );
    }

    #[test]
    fn distance_dimension_mismatch() {
        let err = distance(
            DistanceMetric::Euclidean,
            &ev(&[1.0, 0.0]),
            &ev(&[1.0, 0.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let err = distance(
            DistanceMetric::CosineDistance,
            &ev(&[0.0, 0.0]),
            &ev(&[1.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { .. }));
    }

    #[test]
    fn aggregate_identical_members() {
        let t = Template::new(0, vec![ev(&[1.0, 0.0]), ev(&[1.0, 0.0])]).unwrap();
        assert_eq!(aggregate_template(&t).unwrap().values(), &[1.0, 0.0]);
    }

    #[test]
    fn aggregate_symmetric_pair() {
        let t = Template::new(0, vec![ev(&[1.0, 0.0]), ev(&[0.0, 1.0])]).unwrap();
        let got = aggregate_template(&t).unwrap();
        let want = (2.0f64).sqrt() / 2.0;
        assert!((got.values()[0] - want).abs() < 1e-15);
        assert!((got.values()[1] - want).abs() < 1e-15);
    }

    #[test]
    fn aggregate_cancelling_pair_is_degenerate() {
        let t = Template::new(0, vec![ev(&[1.0, 0.0]), ev(&[-1.0, 0.0])]).unwrap();
        assert!(matches!(
            aggregate_template(&t).unwrap_err(),
            Error::DegenerateVector { .. }
        ));
    }

    #[test]
    fn set_rejects_duplicate_ids_and_bad_dims() {
        let mut s = EmbeddingSet::new("m", 2).unwrap();
        s.push(EmbeddingItem {
            item_id: 1,
            class_label: 0,
            vector: ev(&[1.0, 0.0]),
        })
        .unwrap();
        let dup = s.push(EmbeddingItem {
            item_id: 1,
            class_label: 0,
            vector: ev(&[0.0, 1.0]),
        });
        assert!(matches!(dup.unwrap_err(), Error::InvalidConfig(_)));
        let bad = s.push(EmbeddingItem {
            item_id: 2,
            class_label: 0,
            vector: ev(&[0.0, 1.0, 0.0]),
        });
        assert!(matches!(bad.unwrap_err(), Error::DimensionMismatch { .. }));
    }

    #[test]
    fn vector_rejects_non_finite_and_short() {
        assert!(EmbeddingVector::new(vec![1.0]).is_err());
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![1.0, f64::INFINITY]).is_err());
    }
}
