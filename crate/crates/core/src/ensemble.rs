//! Inference-time fusion of transformed gallery embeddings.
//!
//! Every gallery sample is embedded by N gallery models and each embedding is
//! mapped into the query model's space, giving a stack of N vectors per item.
//! The stack is fused by coordinate-wise averaging, and the mean pairwise
//! distance between stack members doubles as a per-item uncertainty score
//! used to reject unreliable gallery entries before indexing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{
    distance, l2_normalize, DistanceMetric, EmbeddingItem, EmbeddingSet, EmbeddingVector, EPS_NORM,
};
use crate::error::{Error, Result};
use crate::{format, seedmix};

/// One gallery sample's transformed embeddings, one per gallery model, in a
/// fixed model order shared by every stack of the same fusion run.
#[derive(Debug, Clone)]
pub struct TransformedStack {
    pub item_id: u32,
    pub class_label: u32,
    members: Vec<EmbeddingVector>,
    model_ids: Vec<String>,
}

impl TransformedStack {
    pub fn new(
        item_id: u32,
        class_label: u32,
        members: Vec<EmbeddingVector>,
        model_ids: Vec<String>,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid_config(
                "a transformed stack needs at least one member",
            ));
        }
        if model_ids.len() != members.len() {
            return Err(Error::invalid_config(format!(
                "stack has {} members but {} model ids",
                members.len(),
                model_ids.len()
            )));
        }
        let dim = members[0].dim();
        for m in &members[1..] {
            if m.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.dim(),
                });
            }
        }
        Ok(Self {
            item_id,
            class_label,
            members,
            model_ids,
        })
    }

    pub fn members(&self) -> &[EmbeddingVector] {
        &self.members
    }

    pub fn model_ids(&self) -> &[String] {
        &self.model_ids
    }
}

/// One fused gallery entry. `fused` is the raw coordinate-wise mean; scoring
/// uses [`FusedGalleryItem::normalized`]. `variance` is present exactly when
/// two or more models contributed.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGalleryItem {
    pub item_id: u32,
    pub class_label: u32,
    pub fused: EmbeddingVector,
    pub degenerate: bool,
    pub variance: Option<f64>,
    pub contributing_models: Vec<String>,
}

impl FusedGalleryItem {
    /// Unit-norm view for cosine scoring; `None` when the members cancelled
    /// out and the mean collapsed to (near) zero.
    pub fn normalized(&self) -> Option<EmbeddingVector> {
        if self.degenerate {
            None
        } else {
            Some(l2_normalize(&self.fused).expect("non-degenerate fused vector"))
        }
    }
}

/// Mean pairwise cosine distance over normalized members, each pair computed
/// in the chord form `0.5 * ||a - b||^2` so identical members score exactly
/// zero. A member too short to normalize contributes the maximum distance
/// 2.0 to each of its pairs, so fusion can score every stack without an
/// error path.
fn mean_pairwise_cosine(members: &[EmbeddingVector]) -> f64 {
    let normed: Vec<Option<EmbeddingVector>> =
        members.iter().map(|m| l2_normalize(m).ok()).collect();
    let n = members.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += match (&normed[i], &normed[j]) {
                (Some(a), Some(b)) => {
                    0.5 * a
                        .values()
                        .iter()
                        .zip(b.values())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                }
                _ => 2.0,
            };
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Per-item uncertainty: mean pairwise distance between stack members,
/// computed on normalized vectors for the cosine metric and on raw vectors
/// for the Euclidean one.
pub fn variance_with_metric(stack: &TransformedStack, metric: DistanceMetric) -> Result<f64> {
    let n = stack.members.len();
    if n < 2 {
        return Err(Error::InsufficientModels(n));
    }
    match metric {
        DistanceMetric::CosineDistance => {
            for m in &stack.members {
                let norm = m.norm();
                if norm <= EPS_NORM {
                    return Err(Error::DegenerateVector {
                        norm,
                        eps: EPS_NORM,
                    });
                }
            }
            Ok(mean_pairwise_cosine(&stack.members))
        }
        DistanceMetric::Euclidean => {
            let mut total = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    total += distance(metric, &stack.members[i], &stack.members[j])?;
                }
            }
            Ok(total / (n * (n - 1) / 2) as f64)
        }
    }
}

/// [`variance_with_metric`] under the default cosine metric.
pub fn variance(stack: &TransformedStack) -> Result<f64> {
    variance_with_metric(stack, DistanceMetric::CosineDistance)
}

/// Fuses a stack into a single gallery entry by coordinate-wise averaging.
/// Never fails: a cancelled-out mean is flagged as degenerate instead so the
/// fused gallery stays index-aligned with its source items.
pub fn fuse_mean(stack: &TransformedStack) -> FusedGalleryItem {
    let n = stack.members.len();
    let dim = stack.members[0].dim();
    let mut mean = vec![0.0; dim];
    for m in &stack.members {
        for (acc, x) in mean.iter_mut().zip(m.values()) {
            *acc += x;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= n as f64;
    }
    let fused = EmbeddingVector::new(mean)
        .expect("mean of finite embeddings is finite")
        .quantize_f32();
    let degenerate = fused.norm() <= EPS_NORM;
    let variance = if n >= 2 {
        Some(mean_pairwise_cosine(&stack.members))
    } else {
        None
    };
    FusedGalleryItem {
        item_id: stack.item_id,
        class_label: stack.class_label,
        fused,
        degenerate,
        variance,
        contributing_models: stack.model_ids.clone(),
    }
}

/// Aligns N transformed sets by item id and fuses each aligned stack. All
/// sets must cover exactly the same items with the same labels. Output is
/// ordered by ascending item id.
pub fn fuse_sets(sets: &[EmbeddingSet]) -> Result<Vec<FusedGalleryItem>> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid_config("fusion needs at least one transformed set"))?;
    let model_ids: Vec<String> = sets.iter().map(|s| s.model_id().to_string()).collect();
    for s in &sets[1..] {
        if s.dim() != first.dim() {
            return Err(Error::DimensionMismatch {
                expected: first.dim(),
                got: s.dim(),
            });
        }
        if s.len() != first.len() {
            return Err(Error::invalid_config(format!(
                "set {} has {} items, expected {}",
                s.model_id(),
                s.len(),
                first.len()
            )));
        }
    }
    let mut order: Vec<&EmbeddingItem> = first.items().iter().collect();
    order.sort_by_key(|it| it.item_id);
    let by_id: Vec<std::collections::HashMap<u32, &EmbeddingItem>> = sets
        .iter()
        .map(|s| s.items().iter().map(|it| (it.item_id, it)).collect())
        .collect();
    let mut fused = Vec::with_capacity(order.len());
    for anchor in order {
        let mut members = Vec::with_capacity(sets.len());
        for (set, map) in sets.iter().zip(&by_id) {
            let item = map.get(&anchor.item_id).ok_or_else(|| {
                Error::invalid_config(format!(
                    "set {} is missing item {}",
                    set.model_id(),
                    anchor.item_id
                ))
            })?;
            if item.class_label != anchor.class_label {
                return Err(Error::invalid_config(format!(
                    "item {} labeled {} in set {} but {} in set {}",
                    anchor.item_id,
                    anchor.class_label,
                    first.model_id(),
                    item.class_label,
                    set.model_id()
                )));
            }
            members.push(item.vector.clone());
        }
        let stack = TransformedStack::new(
            anchor.item_id,
            anchor.class_label,
            members,
            model_ids.clone(),
        )?;
        fused.push(fuse_mean(&stack));
    }
    Ok(fused)
}

/// Which fused gallery entries to drop before indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RejectionPolicy {
    /// Keep items whose variance is at or below `threshold`.
    VarianceThreshold { threshold: f64 },
    /// Keep the `floor(coverage * len)` lowest-variance items, ties broken by
    /// ascending item id.
    CoverageQuantile { coverage: f64 },
    /// Keep a seeded uniform sample of `floor(coverage * len)` items. The
    /// baseline rejection that ignores variance entirely.
    Random { coverage: f64, seed: u64 },
}

fn retain_count(coverage: f64, len: usize) -> Result<usize> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(Error::invalid_config(format!(
            "coverage must be in (0, 1], got {coverage}"
        )));
    }
    Ok((coverage * len as f64).floor() as usize)
}

fn variances(items: &[FusedGalleryItem]) -> Result<Vec<f64>> {
    items
        .iter()
        .map(|it| it.variance.ok_or(Error::InsufficientModels(1)))
        .collect()
}

/// Splits `items` into (retained, rejected) under `policy`. Both halves keep
/// the original item order and together cover the input exactly.
pub fn apply_rejection(
    items: &[FusedGalleryItem],
    policy: &RejectionPolicy,
) -> Result<(Vec<FusedGalleryItem>, Vec<FusedGalleryItem>)> {
    let keep: Vec<bool> = match policy {
        RejectionPolicy::VarianceThreshold { threshold } => {
            if !threshold.is_finite() || *threshold < 0.0 {
                return Err(Error::invalid_config(format!(
                    "rejection threshold must be a finite value >= 0, got {threshold}"
                )));
            }
            let u = variances(items)?;
            u.into_iter().map(|u| u <= *threshold).collect()
        }
        RejectionPolicy::CoverageQuantile { coverage } => {
            let count = retain_count(*coverage, items.len())?;
            let u = variances(items)?;
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.sort_by(|&a, &b| {
                u[a].total_cmp(&u[b])
                    .then(items[a].item_id.cmp(&items[b].item_id))
            });
            let mut keep = vec![false; items.len()];
            for &idx in &order[..count] {
                keep[idx] = true;
            }
            keep
        }
        RejectionPolicy::Random { coverage, seed } => {
            let count = retain_count(*coverage, items.len())?;
            let mut rng = seedmix::rng(*seed, &["rejection-random"]);
            let mut keep = vec![false; items.len()];
            for idx in rand::seq::index::sample(&mut rng, items.len(), count).into_vec() {
                keep[idx] = true;
            }
            keep
        }
    };
    let mut retained = Vec::new();
    let mut rejected = Vec::new();
    for (item, keep) in items.iter().zip(&keep) {
        if *keep {
            retained.push(item.clone());
        } else {
            rejected.push(item.clone());
        }
    }
    Ok((retained, rejected))
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarItem {
    item_id: u32,
    variance: Option<f64>,
    degenerate: bool,
}

/// Metadata that the binary embedding format has no room for: which models
/// contributed and each item's uncertainty.
#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    query_model_id: String,
    contributing_models: Vec<String>,
    items: Vec<SidecarItem>,
}

/// A fused gallery loaded back from disk.
#[derive(Debug, Clone)]
pub struct FusedGallery {
    pub query_model_id: String,
    pub items: Vec<FusedGalleryItem>,
}

/// Where the JSON sidecar of a fused gallery file lives.
pub fn fused_sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Writes the fused vectors in the binary embedding format under model id
/// `fused:<query_model_id>` plus a JSON sidecar with per-item variance and
/// degeneracy flags.
pub fn write_fused_gallery(
    path: &Path,
    query_model_id: &str,
    items: &[FusedGalleryItem],
) -> Result<()> {
    let first = items.first().ok_or(Error::EmptyGallery)?;
    let mut set = EmbeddingSet::new(format!("fused:{query_model_id}"), first.fused.dim())?;
    for it in items {
        if it.contributing_models != first.contributing_models {
            return Err(Error::invalid_config(format!(
                "item {} disagrees on contributing models",
                it.item_id
            )));
        }
        set.push(EmbeddingItem {
            item_id: it.item_id,
            class_label: it.class_label,
            vector: it.fused.clone(),
        })?;
    }
    format::write_embedding_set(path, &set)?;
    let sidecar = Sidecar {
        query_model_id: query_model_id.to_string(),
        contributing_models: first.contributing_models.clone(),
        items: items
            .iter()
            .map(|it| SidecarItem {
                item_id: it.item_id,
                variance: it.variance,
                degenerate: it.degenerate,
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::format(format!("fused sidecar: {e}")))?;
    json.push('\n');
    fs::write(fused_sidecar_path(path), json)?;
    Ok(())
}

/// Reads a fused gallery and its sidecar, validating that they describe the
/// same items in the same order.
pub fn read_fused_gallery(path: &Path) -> Result<FusedGallery> {
    let set = format::read_embedding_set(path)?;
    let raw = fs::read_to_string(fused_sidecar_path(path))?;
    let sidecar: Sidecar =
        serde_json::from_str(&raw).map_err(|e| Error::format(format!("fused sidecar: {e}")))?;
    let expected = format!("fused:{}", sidecar.query_model_id);
    if set.model_id() != expected {
        return Err(Error::format(format!(
            "fused gallery model id {:?} does not match sidecar {:?}",
            set.model_id(),
            expected
        )));
    }
    if set.len() != sidecar.items.len() {
        return Err(Error::format(format!(
            "fused gallery has {} items but sidecar lists {}",
            set.len(),
            sidecar.items.len()
        )));
    }
    let mut items = Vec::with_capacity(set.len());
    for (item, meta) in set.items().iter().zip(&sidecar.items) {
        if item.item_id != meta.item_id {
            return Err(Error::format(format!(
                "fused gallery item {} does not match sidecar item {}",
                item.item_id, meta.item_id
            )));
        }
        items.push(FusedGalleryItem {
            item_id: item.item_id,
            class_label: item.class_label,
            fused: item.vector.clone(),
            degenerate: meta.degenerate,
            variance: meta.variance,
            contributing_models: sidecar.contributing_models.clone(),
        });
    }
    Ok(FusedGallery {
        query_model_id: sidecar.query_model_id,
        items,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::seedmix;

    fn vector(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    fn stack(members: &[&[f64]]) -> TransformedStack {
        let vectors: Vec<EmbeddingVector> = members.iter().map(|m| vector(m)).collect();
        let ids: Vec<String> = (0..members.len()).map(|i| format!("model-{i}")).collect();
        TransformedStack::new(7, 3, vectors, ids).unwrap()
    }

    fn dummy_item(item_id: u32, variance: Option<f64>) -> FusedGalleryItem {
        FusedGalleryItem {
            item_id,
            class_label: item_id,
            fused: vector(&[1.0, 0.0]),
            degenerate: false,
            variance,
            contributing_models: vec!["ma".into(), "mb".into()],
        }
    }

    fn ids(items: &[FusedGalleryItem]) -> Vec<u32> {
        items.iter().map(|it| it.item_id).collect()
    }

    #[test]
    fn stack_validation_rejects_bad_shapes() {
        let err = TransformedStack::new(0, 0, vec![], vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));

        let err = TransformedStack::new(
            0,
            0,
            vec![vector(&[1.0, 0.0]), vector(&[1.0, 0.0, 0.0])],
            vec!["a".into(), "b".into()],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 2,
                got: 3
            }
        ));

        let err =
            TransformedStack::new(0, 0, vec![vector(&[1.0, 0.0])], vec![]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn fusing_identical_members_returns_the_member_with_zero_variance() {
        let v = [0.5, -0.25, 0.125];
        let fused = fuse_mean(&stack(&[&v, &v, &v]));
        assert_eq!(fused.fused.values(), &v);
        assert_eq!(fused.variance, Some(0.0));
        assert!(!fused.degenerate);
        assert_eq!(fused.item_id, 7);
        assert_eq!(fused.class_label, 3);
        assert_eq!(fused.contributing_models.len(), 3);
    }

    #[test]
    fn fusing_orthogonal_pair_gives_unit_variance() {
        let fused = fuse_mean(&stack(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(fused.fused.values(), &[0.5, 0.5]);
        assert_eq!(fused.variance, Some(1.0));
        assert!(!fused.degenerate);
    }

    #[test]
    fn fusing_cancelling_pair_is_degenerate_with_max_variance() {
        let fused = fuse_mean(&stack(&[&[1.0, 0.0], &[-1.0, 0.0]]));
        assert_eq!(fused.fused.values(), &[0.0, 0.0]);
        assert_eq!(fused.variance, Some(2.0));
        assert!(fused.degenerate);
        assert!(fused.normalized().is_none());
    }

    #[test]
    fn single_member_stack_has_no_variance() {
        let fused = fuse_mean(&stack(&[&[0.0, 2.0]]));
        assert_eq!(fused.fused.values(), &[0.0, 2.0]);
        assert_eq!(fused.variance, None);
        let unit = fused.normalized().unwrap();
        assert_eq!(unit.values(), &[0.0, 1.0]);
    }

    #[test]
    fn variance_matches_hand_enumerated_pairs() {
        let s = stack(&[&[1.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]);
        assert_eq!(variance(&s).unwrap(), 4.0 / 3.0);
        assert_eq!(fuse_mean(&s).variance, Some(4.0 / 3.0));
    }

    #[test]
    fn variance_rejects_single_member_and_degenerate_members() {
        let err = variance(&stack(&[&[1.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::InsufficientModels(1)));

        let s = stack(&[&[1.0, 0.0], &[1e-12, 0.0]]);
        let err = variance(&s).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { .. }));
        // Fusion has no error path: the unusable member costs the maximum
        // pairwise distance instead.
        assert_eq!(fuse_mean(&s).variance, Some(2.0));
    }

    #[test]
    fn euclidean_variance_ignores_direction_degeneracy() {
        let s = stack(&[&[3.0, 4.0], &[0.0, 0.0]]);
        assert_eq!(
            variance_with_metric(&s, DistanceMetric::Euclidean).unwrap(),
            5.0
        );
        assert!(variance_with_metric(&s, DistanceMetric::CosineDistance).is_err());
    }

    #[test]
    fn coverage_quantile_matches_direct_sort() {
        let items: Vec<FusedGalleryItem> = (0..10)
            .map(|i| dummy_item(i, Some(i as f64 / 10.0)))
            .collect();
        let (retained, rejected) =
            apply_rejection(&items, &RejectionPolicy::CoverageQuantile { coverage: 0.7 })
                .unwrap();
        assert_eq!(ids(&retained), vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(ids(&rejected), vec![7, 8, 9]);
    }

    #[test]
    fn full_coverage_retains_everything() {
        let items: Vec<FusedGalleryItem> =
            (0..5).map(|i| dummy_item(i, Some(0.1 * i as f64))).collect();
        let (retained, rejected) =
            apply_rejection(&items, &RejectionPolicy::CoverageQuantile { coverage: 1.0 })
                .unwrap();
        assert_eq!(ids(&retained), vec![0, 1, 2, 3, 4]);
        assert!(rejected.is_empty());
    }

    #[test]
    fn zero_threshold_rejects_all_positive_variances() {
        let mut items: Vec<FusedGalleryItem> =
            (0..4).map(|i| dummy_item(i, Some(0.2))).collect();
        let (retained, rejected) = apply_rejection(
            &items,
            &RejectionPolicy::VarianceThreshold { threshold: 0.0 },
        )
        .unwrap();
        assert!(retained.is_empty());
        assert_eq!(rejected.len(), 4);

        items[2].variance = Some(0.0);
        let (retained, _) = apply_rejection(
            &items,
            &RejectionPolicy::VarianceThreshold { threshold: 0.0 },
        )
        .unwrap();
        assert_eq!(ids(&retained), vec![2]);
    }

    #[test]
    fn quantile_ties_break_by_ascending_item_id() {
        let items: Vec<FusedGalleryItem> = [3u32, 1, 2, 0]
            .iter()
            .map(|&i| dummy_item(i, Some(0.5)))
            .collect();
        let (retained, rejected) =
            apply_rejection(&items, &RejectionPolicy::CoverageQuantile { coverage: 0.5 })
                .unwrap();
        // Lowest two ids win the tie; both halves keep input order.
        assert_eq!(ids(&retained), vec![1, 0]);
        assert_eq!(ids(&rejected), vec![3, 2]);
    }

    #[test]
    fn random_rejection_is_seeded_and_ignores_variance() {
        let items: Vec<FusedGalleryItem> = (0..20).map(|i| dummy_item(i, None)).collect();
        let policy = RejectionPolicy::Random {
            coverage: 0.6,
            seed: 11,
        };
        let (first, _) = apply_rejection(&items, &policy).unwrap();
        let (second, _) = apply_rejection(&items, &policy).unwrap();
        assert_eq!(ids(&first), ids(&second));
        assert_eq!(first.len(), 12);

        let other = RejectionPolicy::Random {
            coverage: 0.6,
            seed: 12,
        };
        let (third, _) = apply_rejection(&items, &other).unwrap();
        assert_ne!(ids(&first), ids(&third));
    }

    #[test]
    fn rejection_validates_inputs() {
        let with_u: Vec<FusedGalleryItem> = (0..3).map(|i| dummy_item(i, Some(0.1))).collect();
        let without_u: Vec<FusedGalleryItem> = (0..3).map(|i| dummy_item(i, None)).collect();

        for policy in [
            RejectionPolicy::VarianceThreshold { threshold: 0.5 },
            RejectionPolicy::CoverageQuantile { coverage: 0.5 },
        ] {
            let err = apply_rejection(&without_u, &policy).unwrap_err();
            assert!(matches!(err, Error::InsufficientModels(_)));
        }

        for coverage in [0.0, -0.5, 1.5, f64::NAN] {
            let err = apply_rejection(
                &with_u,
                &RejectionPolicy::CoverageQuantile { coverage },
            )
            .unwrap_err();
            assert!(matches!(err, Error::InvalidConfig(_)));
        }

        for threshold in [-0.1, f64::NAN, f64::INFINITY] {
            let err = apply_rejection(
                &with_u,
                &RejectionPolicy::VarianceThreshold { threshold },
            )
            .unwrap_err();
            assert!(matches!(err, Error::InvalidConfig(_)));
        }
    }

    #[test]
    fn fuse_sets_aligns_items_by_id() {
        let mut a = EmbeddingSet::new("ma", 2).unwrap();
        a.push(EmbeddingItem {
            item_id: 5,
            class_label: 1,
            vector: vector(&[1.0, 0.0]),
        })
        .unwrap();
        a.push(EmbeddingItem {
            item_id: 3,
            class_label: 0,
            vector: vector(&[0.0, 1.0]),
        })
        .unwrap();
        let mut b = EmbeddingSet::new("mb", 2).unwrap();
        b.push(EmbeddingItem {
            item_id: 3,
            class_label: 0,
            vector: vector(&[0.0, 1.0]),
        })
        .unwrap();
        b.push(EmbeddingItem {
            item_id: 5,
            class_label: 1,
            vector: vector(&[0.0, 1.0]),
        })
        .unwrap();

        let fused = fuse_sets(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(fused.len(), 2);
        assert_eq!(fused[0].item_id, 3);
        assert_eq!(fused[0].fused.values(), &[0.0, 1.0]);
        assert_eq!(fused[0].variance, Some(0.0));
        assert_eq!(fused[1].item_id, 5);
        assert_eq!(fused[1].fused.values(), &[0.5, 0.5]);
        assert_eq!(fused[1].variance, Some(1.0));
        assert_eq!(fused[1].contributing_models, vec!["ma", "mb"]);

        let mut c = EmbeddingSet::new("mc", 2).unwrap();
        c.push(EmbeddingItem {
            item_id: 3,
            class_label: 2,
            vector: vector(&[0.0, 1.0]),
        })
        .unwrap();
        c.push(EmbeddingItem {
            item_id: 5,
            class_label: 1,
            vector: vector(&[0.0, 1.0]),
        })
        .unwrap();
        let err = fuse_sets(&[a.clone(), c]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));

        let mut d = EmbeddingSet::new("md", 2).unwrap();
        d.push(EmbeddingItem {
            item_id: 9,
            class_label: 0,
            vector: vector(&[0.0, 1.0]),
        })
        .unwrap();
        d.push(EmbeddingItem {
            item_id: 5,
            class_label: 1,
            vector: vector(&[0.0, 1.0]),
        })
        .unwrap();
        let err = fuse_sets(&[a, d]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn fused_gallery_round_trips_through_files() {
        let mut rng = seedmix::rng(402, &["fused-io"]);
        let mut items = Vec::new();
        for i in 0..6u32 {
            let members: Vec<EmbeddingVector> = (0..3)
                .map(|_| {
                    let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    EmbeddingVector::new(v).unwrap().quantize_f32()
                })
                .collect();
            let ids = vec!["ma".into(), "mb".into(), "mc".into()];
            items.push(fuse_mean(
                &TransformedStack::new(i, i / 2, members, ids).unwrap(),
            ));
        }
        items.push(fuse_mean(
            &TransformedStack::new(
                100,
                50,
                vec![vector(&[1.0, 0.0, 0.0, 0.0]), vector(&[-1.0, 0.0, 0.0, 0.0]), vector(&[0.0, 0.0, 0.0, 0.0])],
                vec!["ma".into(), "mb".into(), "mc".into()],
            )
            .unwrap(),
        ));
        assert!(items[6].degenerate);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gallery.cmce");
        write_fused_gallery(&path, "query-model", &items).unwrap();
        let loaded = read_fused_gallery(&path).unwrap();
        assert_eq!(loaded.query_model_id, "query-model");
        assert_eq!(loaded.items, items);

        // Rewriting what was just read is byte-identical for both files.
        let second = dir.path().join("copy.cmce");
        write_fused_gallery(&second, &loaded.query_model_id, &loaded.items).unwrap();
        assert_eq!(
            fs::read(&path).unwrap(),
            fs::read(&second).unwrap()
        );
        assert_eq!(
            fs::read(fused_sidecar_path(&path)).unwrap(),
            fs::read(fused_sidecar_path(&second)).unwrap()
        );
    }

    #[test]
    fn fused_gallery_rejects_mismatched_sidecar() {
        let items = vec![dummy_item(1, Some(0.25)), dummy_item(2, Some(0.5))];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gallery.cmce");
        write_fused_gallery(&path, "q", &items).unwrap();

        let sidecar = fused_sidecar_path(&path);
        let tampered = fs::read_to_string(&sidecar)
            .unwrap()
            .replace("\"item_id\": 2", "\"item_id\": 9");
        fs::write(&sidecar, tampered).unwrap();
        let err = read_fused_gallery(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)));

        assert!(matches!(
            write_fused_gallery(&path, "q", &[]).unwrap_err(),
            Error::EmptyGallery
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn variance_and_fusion_ignore_member_order(
            raw in (2usize..6).prop_flat_map(|dim| {
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), 2..6)
            }),
            rotate in 0usize..5,
        ) {
            prop_assume!(raw.iter().all(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6));
            let members: Vec<EmbeddingVector> =
                raw.iter().map(|m| vector(m)).collect();
            let n = members.len();
            let ids: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
            let base = TransformedStack::new(1, 0, members.clone(), ids.clone()).unwrap();

            let mut shifted = members;
            shifted.rotate_left(rotate % n);
            let turned = TransformedStack::new(1, 0, shifted, ids).unwrap();

            let u0 = variance(&base).unwrap();
            let u1 = variance(&turned).unwrap();
            prop_assert!((u0 - u1).abs() < 1e-10);

            let f0 = fuse_mean(&base);
            let f1 = fuse_mean(&turned);
            for (a, b) in f0.fused.values().iter().zip(f1.fused.values()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn variance_ignores_positive_member_scaling(
            raw in (2usize..6).prop_flat_map(|dim| {
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), 2..6)
            }),
            scale in 0.05f64..20.0,
            which in 0usize..5,
        ) {
            prop_assume!(raw.iter().all(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt() > 1e-6));
            let members: Vec<EmbeddingVector> = raw.iter().map(|m| vector(m)).collect();
            let n = members.len();
            let ids: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
            let base = TransformedStack::new(1, 0, members.clone(), ids.clone()).unwrap();

            let mut scaled = members;
            let target = which % n;
            scaled[target] = EmbeddingVector::new(
                scaled[target].values().iter().map(|x| x * scale).collect(),
            )
            .unwrap();
            let stretched = TransformedStack::new(1, 0, scaled, ids).unwrap();

            let u0 = variance(&base).unwrap();
            let u1 = variance(&stretched).unwrap();
            prop_assert!((u0 - u1).abs() < 1e-10);
        }

        #[test]
        fn quantile_rejection_partitions_at_the_boundary(
            us in prop::collection::vec(0.0f64..1.0, 1..40),
            coverage in 0.01f64..1.0,
        ) {
            let items: Vec<FusedGalleryItem> = us
                .iter()
                .enumerate()
                .map(|(i, &u)| dummy_item(i as u32, Some(u)))
                .collect();
            let (retained, rejected) = apply_rejection(
                &items,
                &RejectionPolicy::CoverageQuantile { coverage },
            )
            .unwrap();
            let expected = (coverage * items.len() as f64).floor() as usize;
            prop_assert_eq!(retained.len(), expected);
            prop_assert_eq!(retained.len() + rejected.len(), items.len());
            if !retained.is_empty() && !rejected.is_empty() {
                let max_kept = retained
                    .iter()
                    .map(|it| it.variance.unwrap())
                    .fold(f64::MIN, f64::max);
                let min_dropped = rejected
                    .iter()
                    .map(|it| it.variance.unwrap())
                    .fold(f64::MAX, f64::min);
                prop_assert!(max_kept <= min_dropped);
            }
        }
    }
}
