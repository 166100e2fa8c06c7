//! Gallery indexing and the evaluation protocols.
//!
//! All searches are exact linear scans, so every metric here can be (and is)
//! tested for bit-exact equality against brute-force oracles. Scoring is
//! cosine similarity on normalized vectors throughout; degenerate gallery
//! entries stay in the index but score `-inf` against every query.

mod report;

pub use report::{export_report, read_report, Curve, CurvePoint, Report};

use std::collections::HashSet;

use rayon::prelude::*;

use crate::embedding::{l2_normalize, EmbeddingSet, EmbeddingVector, EPS_NORM};
use crate::ensemble::{apply_rejection, FusedGalleryItem, RejectionPolicy};
use crate::error::{Error, Result};

/// One searchable entry. `unit` is `None` for degenerate vectors.
#[derive(Debug, Clone)]
struct IndexEntry {
    item_id: u32,
    class_label: u32,
    unit: Option<EmbeddingVector>,
}

/// An immutable exact-search gallery over unit vectors.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    dim: usize,
    entries: Vec<IndexEntry>,
    labels: HashSet<u32>,
}

/// Result of a top-1 search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub item_id: u32,
    pub class_label: u32,
    pub score: f64,
}

impl GalleryIndex {
    /// Builds an index from `(item_id, class_label, vector)` rows, keeping
    /// the input order. Vectors are normalized here; rows whose vector is
    /// too short to normalize become sentinels that score `-inf`.
    pub fn from_rows(rows: Vec<(u32, u32, EmbeddingVector)>) -> Result<Self> {
        let first = rows.first().ok_or(Error::EmptyGallery)?;
        let dim = first.2.dim();
        let mut entries = Vec::with_capacity(rows.len());
        let mut labels = HashSet::new();
        for (item_id, class_label, vector) in rows {
            if vector.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: vector.dim(),
                });
            }
            let unit = if vector.norm() <= EPS_NORM {
                None
            } else {
                Some(l2_normalize(&vector)?)
            };
            labels.insert(class_label);
            entries.push(IndexEntry {
                item_id,
                class_label,
                unit,
            });
        }
        Ok(Self {
            dim,
            entries,
            labels,
        })
    }

    /// Index over one model's raw embedding set.
    pub fn from_set(set: &EmbeddingSet) -> Result<Self> {
        Self::from_rows(
            set.items()
                .iter()
                .map(|it| (it.item_id, it.class_label, it.vector.clone()))
                .collect(),
        )
    }

    /// Index over fused gallery items; degenerate items become sentinels.
    pub fn from_fused(items: &[FusedGalleryItem]) -> Result<Self> {
        Self::from_rows(
            items
                .iter()
                .map(|it| (it.item_id, it.class_label, it.fused.clone()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Class labels enrolled in the gallery (degenerate entries included).
    pub fn labels(&self) -> &HashSet<u32> {
        &self.labels
    }

    pub fn contains_label(&self, class_label: u32) -> bool {
        self.labels.contains(&class_label)
    }

    fn normalize_query(&self, query: &EmbeddingVector) -> Result<EmbeddingVector> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        l2_normalize(query)
    }

    fn scan(&self, unit_query: &EmbeddingVector, exclude_item_id: Option<u32>) -> Option<SearchHit> {
        let mut best: Option<SearchHit> = None;
        for entry in &self.entries {
            if Some(entry.item_id) == exclude_item_id {
                continue;
            }
            let score = match &entry.unit {
                Some(unit) => crate::embedding::dot(unit_query.values(), unit.values()),
                None => f64::NEG_INFINITY,
            };
            let better = match &best {
                None => true,
                Some(b) => score > b.score || (score == b.score && entry.item_id < b.item_id),
            };
            if better {
                best = Some(SearchHit {
                    item_id: entry.item_id,
                    class_label: entry.class_label,
                    score,
                });
            }
        }
        best
    }

    /// Exact nearest entry under cosine similarity, ties broken by lowest
    /// item id.
    pub fn search_top1(&self, query: &EmbeddingVector) -> Result<SearchHit> {
        let unit = self.normalize_query(query)?;
        self.scan(&unit, None).ok_or(Error::EmptyGallery)
    }

    /// Like [`GalleryIndex::search_top1`] but skipping one gallery entry;
    /// `None` when nothing else is left to search.
    pub fn search_top1_excluding(
        &self,
        query: &EmbeddingVector,
        exclude_item_id: u32,
    ) -> Result<Option<SearchHit>> {
        let unit = self.normalize_query(query)?;
        Ok(self.scan(&unit, Some(exclude_item_id)))
    }
}

/// Queries for open-set search. Mated probes belong to enrolled classes,
/// nonmated probes to classes absent from the gallery.
#[derive(Debug, Clone, Default)]
pub struct ProbeSet {
    pub mated: Vec<(EmbeddingVector, u32)>,
    pub nonmated: Vec<EmbeddingVector>,
}

/// One point on a TAR/FAR operating curve. `threshold` is the score strictly
/// above which a probe is accepted; `-inf` means accept-all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocOperatingPoint {
    pub far_target: f64,
    pub threshold: f64,
    pub tar: f64,
    pub achieved_far: f64,
}

fn check_far(far: f64) -> Result<()> {
    if !(far > 0.0 && far <= 1.0) {
        return Err(Error::invalid_config(format!(
            "far must be in (0, 1], got {far}"
        )));
    }
    Ok(())
}

fn check_scores(scores: &[f64], what: &'static str) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyScores(what));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid_config(format!("{what} scores contain NaN")));
    }
    Ok(())
}

/// The acceptance threshold for a FAR budget: with K impostor scores and
/// A = floor(far * K), the (A+1)-th largest impostor score. Accepting only
/// scores strictly above it admits at most A impostors, so the achieved FAR
/// never exceeds the target. When the budget covers all impostors the
/// threshold drops to `-inf`.
fn far_threshold(impostor: &[f64], far: f64) -> f64 {
    let k = impostor.len();
    let budget = (far * k as f64).floor() as usize;
    if budget >= k {
        return f64::NEG_INFINITY;
    }
    let mut sorted = impostor.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[budget]
}

/// 1:1 verification TAR at a FAR budget over raw score lists.
pub fn tar_at_far_verification(
    genuine: &[f64],
    impostor: &[f64],
    far: f64,
) -> Result<RocOperatingPoint> {
    check_far(far)?;
    check_scores(genuine, "genuine")?;
    check_scores(impostor, "impostor")?;
    let threshold = far_threshold(impostor, far);
    let tar = genuine.iter().filter(|&&s| s > threshold).count() as f64 / genuine.len() as f64;
    let achieved_far =
        impostor.iter().filter(|&&s| s > threshold).count() as f64 / impostor.len() as f64;
    Ok(RocOperatingPoint {
        far_target: far,
        threshold,
        tar,
        achieved_far,
    })
}

/// 1:N open-set search TAR at a FAR budget. The threshold comes from the
/// nonmated probes' top-1 scores; a mated probe counts as a true accept only
/// if its top-1 is above the threshold AND carries the correct class label.
pub fn open_set_search_eval(
    index: &GalleryIndex,
    probes: &ProbeSet,
    far: f64,
) -> Result<RocOperatingPoint> {
    check_far(far)?;
    if probes.mated.is_empty() {
        return Err(Error::EmptyScores("mated"));
    }
    if probes.nonmated.is_empty() {
        return Err(Error::EmptyScores("nonmated"));
    }
    for (_, label) in &probes.mated {
        if !index.contains_label(*label) {
            return Err(Error::invalid_config(format!(
                "mated probe class {label} is not enrolled in the gallery"
            )));
        }
    }
    // A wrong-label top-1 can never be accepted, which is the same as
    // scoring the probe at -inf.
    let genuine: Vec<f64> = probes
        .mated
        .par_iter()
        .map(|(vector, label)| {
            let hit = index.search_top1(vector)?;
            Ok(if hit.class_label == *label {
                hit.score
            } else {
                f64::NEG_INFINITY
            })
        })
        .collect::<Result<_>>()?;
    let impostor: Vec<f64> = probes
        .nonmated
        .par_iter()
        .map(|vector| Ok(index.search_top1(vector)?.score))
        .collect::<Result<_>>()?;
    tar_at_far_verification(&genuine, &impostor, far)
}

/// A labeled retrieval query. `item_id` names the gallery entry that is this
/// query itself, to be skipped during its own search (leave-one-out); `None`
/// searches the whole gallery.
#[derive(Debug, Clone)]
pub struct LabeledQuery {
    pub item_id: Option<u32>,
    pub class_label: u32,
    pub vector: EmbeddingVector,
}

/// Fraction of queries whose top-1 gallery label matches their own label.
pub fn recall_at_1(index: &GalleryIndex, queries: &[LabeledQuery]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::EmptyScores("queries"));
    }
    let hits: usize = queries
        .par_iter()
        .map(|q| {
            let hit = match q.item_id {
                Some(own) => index.search_top1_excluding(&q.vector, own)?,
                None => Some(index.search_top1(&q.vector)?),
            };
            Ok(usize::from(
                hit.map(|h| h.class_label == q.class_label).unwrap_or(false),
            ))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(hits as f64 / queries.len() as f64)
}

/// Rejection rule compared along a risk-coverage curve: variance-ranked
/// rejection, or the random baseline averaged over the given seeds.
#[derive(Debug, Clone, PartialEq)]
pub enum RiskPolicy {
    Variance,
    Random { seeds: Vec<u64> },
}

impl RiskPolicy {
    fn name(&self) -> &'static str {
        match self {
            RiskPolicy::Variance => "variance",
            RiskPolicy::Random { .. } => "random",
        }
    }

    fn seed_count(&self) -> usize {
        match self {
            RiskPolicy::Variance => 1,
            RiskPolicy::Random { seeds } => seeds.len(),
        }
    }
}

/// One point of a risk-coverage curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskCoveragePoint {
    pub coverage: f64,
    pub metric_value: f64,
    pub policy: String,
    pub seed_count: usize,
}

fn check_coverages(coverages: &[f64]) -> Result<()> {
    if coverages.is_empty() {
        return Err(Error::invalid_config("coverage list is empty"));
    }
    for &c in coverages {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::invalid_config(format!(
                "coverage must be in (0, 1], got {c}"
            )));
        }
    }
    for pair in coverages.windows(2) {
        if pair[1] >= pair[0] {
            return Err(Error::invalid_config(format!(
                "coverages must be strictly decreasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    Ok(())
}

fn retained_sets(
    items: &[FusedGalleryItem],
    coverage: f64,
    policy: &RiskPolicy,
) -> Result<Vec<Vec<FusedGalleryItem>>> {
    match policy {
        RiskPolicy::Variance => {
            let (retained, _) =
                apply_rejection(items, &RejectionPolicy::CoverageQuantile { coverage })?;
            Ok(vec![retained])
        }
        RiskPolicy::Random { seeds } => {
            if seeds.is_empty() {
                return Err(Error::invalid_config("random policy needs at least one seed"));
            }
            seeds
                .iter()
                .map(|&seed| {
                    let (retained, _) =
                        apply_rejection(items, &RejectionPolicy::Random { coverage, seed })?;
                    Ok(retained)
                })
                .collect()
        }
    }
}

/// Open-set TAR as gallery coverage shrinks. At each coverage the index is
/// rebuilt from the retained items; mated probes whose whole class was
/// rejected are re-classified as nonmated, since their identity is no longer
/// enrolled.
pub fn risk_coverage_open_set(
    items: &[FusedGalleryItem],
    probes: &ProbeSet,
    far: f64,
    coverages: &[f64],
    policy: &RiskPolicy,
) -> Result<Vec<RiskCoveragePoint>> {
    check_coverages(coverages)?;
    let mut points = Vec::with_capacity(coverages.len());
    for &coverage in coverages {
        let galleries = retained_sets(items, coverage, policy)?;
        let mut total = 0.0;
        for retained in &galleries {
            let index = GalleryIndex::from_fused(retained)?;
            let mut shrunk = ProbeSet::default();
            for (vector, label) in &probes.mated {
                if index.contains_label(*label) {
                    shrunk.mated.push((vector.clone(), *label));
                } else {
                    shrunk.nonmated.push(vector.clone());
                }
            }
            shrunk.nonmated.extend(probes.nonmated.iter().cloned());
            total += open_set_search_eval(&index, &shrunk, far)?.tar;
        }
        points.push(RiskCoveragePoint {
            coverage,
            metric_value: total / galleries.len() as f64,
            policy: policy.name().to_string(),
            seed_count: policy.seed_count(),
        });
    }
    Ok(points)
}

/// Recall@1 as gallery coverage shrinks. Queries of fully rejected classes
/// are dropped: with their class gone there is no correct answer left.
pub fn risk_coverage_recall(
    items: &[FusedGalleryItem],
    queries: &[LabeledQuery],
    coverages: &[f64],
    policy: &RiskPolicy,
) -> Result<Vec<RiskCoveragePoint>> {
    check_coverages(coverages)?;
    let mut points = Vec::with_capacity(coverages.len());
    for &coverage in coverages {
        let galleries = retained_sets(items, coverage, policy)?;
        let mut total = 0.0;
        for retained in &galleries {
            let index = GalleryIndex::from_fused(retained)?;
            let kept: Vec<LabeledQuery> = queries
                .iter()
                .filter(|q| index.contains_label(q.class_label))
                .cloned()
                .collect();
            total += recall_at_1(&index, &kept)?;
        }
        points.push(RiskCoveragePoint {
            coverage,
            metric_value: total / galleries.len() as f64,
            policy: policy.name().to_string(),
            seed_count: policy.seed_count(),
        });
    }
    Ok(points)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid_config(format!(
            "rank correlation needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::invalid_config(
            "rank correlation needs at least two samples",
        ));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::invalid_config("rank correlation input contains NaN"));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean_a = ra.iter().sum::<f64>() / n;
    let mean_b = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::invalid_config(
            "rank correlation is undefined for constant input",
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// 1-based ranks, ties sharing the average of the positions they span.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let shared = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = shared;
        }
        start = end;
    }
    ranks
}
