//! The acceptance gate. Eleven checks cover gradient correctness, exact
//! protocol oracles, the incompatible-spaces precondition, transform-based
//! recovery, and every ordinal claim the scenario suite reproduces, plus
//! byte-level determinism of the whole pipeline. Each criterion prints one
//! line; the test fails if any criterion does.
//!
//! Ordinal margins and runtime budgets are pinned as constants next to the
//! criterion that asserts them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use cmce_cli::config::{train_seed, ExperimentConfig};
use cmce_cli::pipeline::{
    build_world, embed_split, fuse_with_transform, spawn, EmbedCounter, Split, Workspace,
};
use cmce_cli::scenario::{far_key, risk_key, run_scenario, ScenarioName, ScenarioResult};
use cmce_core::embedding::{l2_normalize, EmbeddingSet, EmbeddingVector};
use cmce_core::evalproto::{
    open_set_search_eval, recall_at_1, tar_at_far_verification, GalleryIndex, LabeledQuery,
    ProbeSet, RocOperatingPoint,
};
use cmce_core::format::{read_embedding_set, write_embedding_set};
use cmce_core::transform::{
    grad_check, init_transform, read_trained_transform, train, write_trained_transform,
    ClassifierHead, FusionMode, PairBatch, TrainConfig, TrainSpec, TrainVariant, TransformNet,
};
use cmce_core::Result;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One criterion's verdict plus the numbers behind it.
struct Verdict {
    pass: bool,
    detail: String,
}

fn pass(detail: String) -> Result<Verdict> {
    Ok(Verdict { pass: true, detail })
}

fn fail(detail: String) -> Result<Verdict> {
    Ok(Verdict { pass: false, detail })
}

// ---------------------------------------------------------------------------
// Criterion 1: analytic gradients vs central finite differences.

const GRAD_MAX_REL_ERR: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const GRAD_BATCH: usize = 16;
const GRAD_PROBES: usize = 48;
const GRAD_BUDGET: Duration = Duration::from_secs(60);

fn gaussian_vec(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn random_net(rng: &mut StdRng, n: usize, m: usize, weight_head: bool) -> TransformNet {
    let mut net = init_transform(n, m, rng.gen(), weight_head).unwrap();
    net.randomize(rng, 0.4);
    net
}

fn random_batch(rng: &mut StdRng, dims: &[usize], m: usize, num_classes: u32) -> PairBatch {
    PairBatch {
        gallery: dims
            .iter()
            .map(|&d| (0..GRAD_BATCH).map(|_| gaussian_vec(rng, d)).collect())
            .collect(),
        query: (0..GRAD_BATCH).map(|_| gaussian_vec(rng, m)).collect(),
        labels: (0..GRAD_BATCH).map(|i| i as u32 % num_classes).collect(),
    }
}

fn criterion_gradients() -> Result<Verdict> {
    let started = Instant::now();
    let m = 12;
    let setups: [(&str, Vec<usize>, bool, FusionMode); 5] = [
        ("m2m", vec![12], false, FusionMode::Independent),
        ("unified", vec![12], true, FusionMode::Independent),
        ("e2e_mean", vec![12, 8, 16], false, FusionMode::E2eMean),
        ("e2e_weighted", vec![12, 8, 16], false, FusionMode::E2eWeighted),
        ("concat", vec![12, 8, 16], false, FusionMode::Concat),
    ];
    let mut worst: f64 = 0.0;
    for (name, dims, with_query, fusion) in &setups {
        for seed in 0..GRAD_SEEDS {
            let mut rng = StdRng::seed_from_u64(4_000 + seed);
            let nets: Vec<TransformNet> = match fusion {
                FusionMode::Concat => vec![random_net(&mut rng, dims.iter().sum(), m, false)],
                FusionMode::E2eWeighted => {
                    dims.iter().map(|&d| random_net(&mut rng, d, m, true)).collect()
                }
                _ => dims.iter().map(|&d| random_net(&mut rng, d, m, false)).collect(),
            };
            let query_net = with_query.then(|| random_net(&mut rng, m, m, false));
            let head = ClassifierHead::init(7, m, 16.0, rng.gen())?;
            let batch = random_batch(&mut rng, dims, m, 7);
            let cfg = TrainConfig { seed, ..TrainConfig::default() };
            let err = grad_check(
                &nets,
                query_net.as_ref(),
                &head,
                &batch,
                &cfg,
                *fusion,
                GRAD_PROBES,
                seed,
            )?;
            if err > worst {
                worst = err;
            }
            if err >= GRAD_MAX_REL_ERR {
                return fail(format!("{name} seed {seed}: max relative error {err:.3e}"));
            }
        }
    }
    let elapsed = started.elapsed();
    if elapsed > GRAD_BUDGET {
        return fail(format!("took {elapsed:.1?}, budget {GRAD_BUDGET:?}"));
    }
    pass(format!("worst relative error {worst:.2e} in {elapsed:.1?}"))
}

// ---------------------------------------------------------------------------
// Criterion 2: protocol implementations vs brute-force oracles, exact.

const ORACLE_INSTANCES: usize = 20;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);

/// The most permissive threshold whose achieved FAR stays within the
/// budget, found by trying every impostor score as a candidate.
fn oracle_operating_point(genuine: &[f64], impostor: &[f64], far: f64) -> RocOperatingPoint {
    let achieved = |t: f64| impostor.iter().filter(|&&s| s > t).count() as f64 / impostor.len() as f64;
    let mut threshold = f64::INFINITY;
    let mut candidates: Vec<f64> = impostor.to_vec();
    candidates.push(f64::NEG_INFINITY);
    for &t in &candidates {
        if achieved(t) <= far && t < threshold {
            threshold = t;
        }
    }
    RocOperatingPoint {
        far_target: far,
        threshold,
        tar: genuine.iter().filter(|&&s| s > threshold).count() as f64 / genuine.len() as f64,
        achieved_far: achieved(threshold),
    }
}

/// Plain scan over every entry: normalized dot product, ties to the lowest
/// item id. Mirrors nothing of the index internals beyond the score
/// definition.
fn oracle_top1(
    entries: &[(u32, u32, EmbeddingVector)],
    query: &EmbeddingVector,
    exclude: Option<u32>,
) -> Option<(u32, u32, f64)> {
    let unit_q = l2_normalize(query).unwrap();
    let mut best: Option<(u32, u32, f64)> = None;
    for (item_id, label, v) in entries {
        if Some(*item_id) == exclude {
            continue;
        }
        let unit = l2_normalize(v).unwrap();
        let score: f64 = unit_q.values().iter().zip(unit.values()).map(|(x, y)| x * y).sum();
        let better = match &best {
            None => true,
            Some((bid, _, bs)) => score > *bs || (score == *bs && item_id < bid),
        };
        if better {
            best = Some((*item_id, *label, score));
        }
    }
    best
}

fn random_rows(rng: &mut StdRng, n: usize, dim: usize, num_classes: u32) -> Vec<(u32, u32, EmbeddingVector)> {
    (0..n)
        .map(|i| {
            let label = rng.gen_range(0..num_classes);
            (i as u32, label, EmbeddingVector::new(gaussian_vec(rng, dim)).unwrap())
        })
        .collect()
}

fn criterion_oracles() -> Result<Verdict> {
    let started = Instant::now();

    for i in 0..ORACLE_INSTANCES {
        let mut rng = StdRng::seed_from_u64(7_000 + i as u64);

        // tar_at_far_verification on raw score lists.
        let n_gen = rng.gen_range(1..=500);
        let n_imp = rng.gen_range(1..=500);
        let genuine: Vec<f64> = (0..n_gen).map(|_| StandardNormal.sample(&mut rng)).collect();
        let impostor: Vec<f64> = (0..n_imp).map(|_| StandardNormal.sample(&mut rng)).collect();
        let far = if i == 0 { 1.0 } else { rng.gen_range(0.001..=1.0) };
        let got = tar_at_far_verification(&genuine, &impostor, far)?;
        let want = oracle_operating_point(&genuine, &impostor, far);
        if got != want {
            return fail(format!("verification instance {i}: {got:?} != {want:?}"));
        }

        // search_top1 over a random gallery.
        let dim = rng.gen_range(4..=32);
        let num_classes = rng.gen_range(2..=25);
        let n_rows = rng.gen_range(1..=200);
        let rows = random_rows(&mut rng, n_rows, dim, num_classes);
        let index = GalleryIndex::from_rows(rows.clone())?;
        for _ in 0..rng.gen_range(1..=50) {
            let q = EmbeddingVector::new(gaussian_vec(&mut rng, dim)).unwrap();
            let hit = index.search_top1(&q)?;
            let want = oracle_top1(&rows, &q, None).unwrap();
            if (hit.item_id, hit.class_label, hit.score) != want {
                return fail(format!("search_top1 instance {i}: {hit:?} != {want:?}"));
            }
        }

        // open_set_search_eval with enrolled mated labels.
        let enrolled: Vec<u32> = index.labels().iter().copied().collect();
        let mut probes = ProbeSet::default();
        for _ in 0..rng.gen_range(1..=250) {
            let label = enrolled[rng.gen_range(0..enrolled.len())];
            probes.mated.push((EmbeddingVector::new(gaussian_vec(&mut rng, dim)).unwrap(), label));
        }
        for _ in 0..rng.gen_range(1..=250) {
            probes.nonmated.push(EmbeddingVector::new(gaussian_vec(&mut rng, dim)).unwrap());
        }
        let far = rng.gen_range(0.01..=1.0);
        let got = open_set_search_eval(&index, &probes, far)?;
        let genuine: Vec<f64> = probes
            .mated
            .iter()
            .map(|(v, label)| {
                let (_, hit_label, score) = oracle_top1(&rows, v, None).unwrap();
                if hit_label == *label {
                    score
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let impostor: Vec<f64> = probes
            .nonmated
            .iter()
            .map(|v| oracle_top1(&rows, v, None).unwrap().2)
            .collect();
        let want = oracle_operating_point(&genuine, &impostor, far);
        if got != want {
            return fail(format!("open_set instance {i}: {got:?} != {want:?}"));
        }

        // recall_at_1 with a leave-one-out / whole-gallery mix.
        let queries: Vec<LabeledQuery> = (0..rng.gen_range(1..=200))
            .map(|j| {
                let row = &rows[rng.gen_range(0..rows.len())];
                let own = (j % 2 == 0 && rows.len() > 1).then_some(row.0);
                LabeledQuery {
                    item_id: own,
                    class_label: row.1,
                    vector: EmbeddingVector::new(gaussian_vec(&mut rng, dim)).unwrap(),
                }
            })
            .collect();
        let got = recall_at_1(&index, &queries)?;
        let hits = queries
            .iter()
            .filter(|q| {
                oracle_top1(&rows, &q.vector, q.item_id)
                    .map(|(_, label, _)| label == q.class_label)
                    .unwrap_or(false)
            })
            .count();
        let want = hits as f64 / queries.len() as f64;
        if got != want {
            return fail(format!("recall instance {i}: {got} != {want}"));
        }
    }

    let elapsed = started.elapsed();
    if elapsed > ORACLE_BUDGET {
        return fail(format!("took {elapsed:.1?}, budget {ORACLE_BUDGET:?}"));
    }
    pass(format!("{ORACLE_INSTANCES} instances per protocol, exact, in {elapsed:.1?}"))
}

// ---------------------------------------------------------------------------
// Criterion 3: incompatible embedding spaces on the default benchmark.

const SYMMETRIC_RECALL_MIN: f64 = 0.9;
const CROSS_MARGIN_OVER_CHANCE: f64 = 0.05;

fn probe_queries(set: &EmbeddingSet) -> Vec<LabeledQuery> {
    set.items()
        .iter()
        .map(|it| LabeledQuery {
            item_id: None,
            class_label: it.class_label,
            vector: it.vector.clone(),
        })
        .collect()
}

fn criterion_incompatible_spaces(cfg: &ExperimentConfig) -> Result<Verdict> {
    let mut symmetric = Vec::new();
    let mut cross = Vec::new();
    for k in 0..cfg.world_seeds {
        let mut counter = EmbedCounter::default();
        let world = build_world(cfg, k)?;
        let query = spawn(cfg, &world, cfg.query_model(), k)?;
        let gallery = spawn(cfg, &world, cfg.gallery_models()[0], k)?;

        let q_gallery = embed_split(&world, &query, Split::Gallery, &cfg.split, &mut counter)?;
        let g_gallery = embed_split(&world, &gallery, Split::Gallery, &cfg.split, &mut counter)?;
        let q_mated = embed_split(&world, &query, Split::ProbeMated, &cfg.split, &mut counter)?;
        let queries = probe_queries(&q_mated);

        symmetric.push(recall_at_1(&GalleryIndex::from_set(&q_gallery)?, &queries)?);
        cross.push(recall_at_1(&GalleryIndex::from_set(&g_gallery)?, &queries)?);
    }
    let sym = mean(&symmetric);
    let crs = mean(&cross);
    let chance = 1.0 / cfg.split.gallery_classes as f64;
    let bound = chance + CROSS_MARGIN_OVER_CHANCE;
    let detail =
        format!("symmetric R@1 {sym:.4} (min {SYMMETRIC_RECALL_MIN}), cross {crs:.4} (max {bound:.4})");
    if sym > SYMMETRIC_RECALL_MIN && crs < bound {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: a single transform recovers the symmetric system.

const RECOVERY_FAR: f64 = 0.1;
const RECOVERY_MAX_GAP: f64 = 0.02;
const RECOVERY_FRACTION: f64 = 0.9;
const RECOVERY_EPOCHS: usize = 40;
const RECOVERY_BUDGET: Duration = Duration::from_secs(600);

fn open_set_tar(index: &GalleryIndex, probes: &ProbeSet, far: f64) -> Result<f64> {
    Ok(open_set_search_eval(index, probes, far)?.tar)
}

fn criterion_recovery(cfg: &ExperimentConfig) -> Result<Verdict> {
    let started = Instant::now();
    let mut m2m = Vec::new();
    let mut unified = Vec::new();
    let mut symmetric = Vec::new();
    for k in 0..cfg.world_seeds {
        let mut counter = EmbedCounter::default();
        let world = build_world(cfg, k)?;
        let query = spawn(cfg, &world, cfg.query_model(), k)?;
        let gallery = spawn(cfg, &world, cfg.gallery_models()[0], k)?;

        let q_train = embed_split(&world, &query, Split::Train, &cfg.split, &mut counter)?;
        let g_train = embed_split(&world, &gallery, Split::Train, &cfg.split, &mut counter)?;
        let q_gallery = embed_split(&world, &query, Split::Gallery, &cfg.split, &mut counter)?;
        let g_gallery = embed_split(&world, &gallery, Split::Gallery, &cfg.split, &mut counter)?;
        let mated = embed_split(&world, &query, Split::ProbeMated, &cfg.split, &mut counter)?;
        let nonmated = embed_split(&world, &query, Split::ProbeNonmated, &cfg.split, &mut counter)?;

        let raw_probes = ProbeSet {
            mated: mated.items().iter().map(|it| (it.vector.clone(), it.class_label)).collect(),
            nonmated: nonmated.items().iter().map(|it| it.vector.clone()).collect(),
        };

        symmetric.push(open_set_tar(&GalleryIndex::from_set(&q_gallery)?, &raw_probes, RECOVERY_FAR)?);

        for (variant, scope, out) in [
            (TrainVariant::M2m, "acceptance/recovery/m2m", &mut m2m),
            (TrainVariant::Unified, "acceptance/recovery/unified", &mut unified),
        ] {
            let mut tc = cfg.train_config(variant);
            tc.seed = train_seed(cfg.master_seed, scope, tc.seed, k);
            tc.epochs = RECOVERY_EPOCHS;
            let trained = train(&TrainSpec {
                variant,
                gallery_sets: vec![&g_train],
                query_set: &q_train,
                cfg: tc,
            })?;
            let fused = fuse_with_transform(&trained, std::slice::from_ref(&g_gallery), cfg.eval.metric)?;
            let index = GalleryIndex::from_fused(&fused)?;
            let probes = ProbeSet {
                mated: raw_probes
                    .mated
                    .iter()
                    .map(|(v, l)| Ok((trained.transform_query(v)?, *l)))
                    .collect::<Result<_>>()?,
                nonmated: raw_probes
                    .nonmated
                    .iter()
                    .map(|v| trained.transform_query(v))
                    .collect::<Result<_>>()?,
            };
            out.push(open_set_tar(&index, &probes, RECOVERY_FAR)?);
        }
    }
    let elapsed = started.elapsed();
    let (m, u, s) = (mean(&m2m), mean(&unified), mean(&symmetric));
    let detail = format!(
        "TAR@FAR={RECOVERY_FAR}: m2m {m:.4}, unified {u:.4}, symmetric {s:.4} in {elapsed:.0?}"
    );
    if elapsed > RECOVERY_BUDGET {
        return fail(format!("took {elapsed:.0?}, budget {RECOVERY_BUDGET:?}"));
    }
    if (m - u).abs() < RECOVERY_MAX_GAP && m >= RECOVERY_FRACTION * s && u >= RECOVERY_FRACTION * s {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------
// Criteria 5-10 read the scenario suite; criterion 11 reruns it.

const HEADLINE_FAR: f64 = 0.01;
const ORDINAL_SLACK: f64 = 0.005;
const SIZE_GAIN_MIN: f64 = 0.01;
const UPDATE_GAIN_MIN: f64 = 0.01;
const SPEARMAN_MIN: f64 = 0.2;
const SUITE_BUDGET: Duration = Duration::from_secs(45 * 60);

struct Suite {
    results: BTreeMap<&'static str, ScenarioResult>,
    wall: Duration,
}

fn run_suite(ws: &Workspace) -> Result<Suite> {
    let started = Instant::now();
    let mut results = BTreeMap::new();
    for name in ScenarioName::ALL {
        results.insert(name.name(), run_scenario(ws, name)?);
    }
    let summary = cmce_cli::summary::collect(ws)?;
    cmce_cli::summary::write_summary(ws, &summary)?;
    Ok(Suite { results, wall: started.elapsed() })
}

fn arm_mean(suite: &Suite, scenario: &str, arm: &str, metric: &str) -> Result<f64> {
    suite.results[scenario]
        .arm(arm)
        .and_then(|a| a.mean(metric))
        .ok_or_else(|| cmce_core::Error::format(format!("{scenario}/{arm}/{metric} missing")))
}

fn criterion_monotonicity(suite: &Suite, cfg: &ExperimentConfig) -> Result<Verdict> {
    let key = far_key(HEADLINE_FAR);
    let mut tars = Vec::new();
    for &size in &cfg.ensemble_sizes {
        tars.push(arm_mean(suite, "ensemble_size", &format!("size{size}"), &key)?);
    }
    let monotone = tars.windows(2).all(|w| w[1] >= w[0]);
    let gain = tars.last().unwrap() - tars.first().unwrap();
    let detail = format!("TAR by size {tars:.4?}, gain {gain:.4} (min {SIZE_GAIN_MIN})");
    if monotone && gain >= SIZE_GAIN_MIN {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn criterion_diversity(suite: &Suite) -> Result<Verdict> {
    let key = far_key(HEADLINE_FAR);
    let dt = arm_mean(suite, "diversity", "transform_seeds", &key)?;
    let dtg = arm_mean(suite, "diversity", "gallery_models", &key)?;
    let dtga = arm_mean(suite, "diversity", "architectures", &key)?;
    let detail = format!("D-T {dt:.4} <= D-TG {dtg:.4} <= D-TGA {dtga:.4} (slack {ORDINAL_SLACK})");
    if dtga >= dtg - ORDINAL_SLACK && dtg >= dt - ORDINAL_SLACK {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn criterion_fusion(suite: &Suite) -> Result<Verdict> {
    let key = far_key(HEADLINE_FAR);
    let m2m = arm_mean(suite, "fusion_variants", "m2m", &key)?;
    let mut others = Vec::new();
    for arm in ["e2e_mean", "e2e_weighted", "concat"] {
        others.push((arm, arm_mean(suite, "fusion_variants", arm, &key)?));
    }
    let detail = format!(
        "m2m {m2m:.4} vs {} (slack {ORDINAL_SLACK})",
        others.iter().map(|(a, v)| format!("{a} {v:.4}")).collect::<Vec<_>>().join(", ")
    );
    if others.iter().all(|(_, v)| m2m >= v - ORDINAL_SLACK) {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn criterion_correlation(suite: &Suite) -> Result<Verdict> {
    let rho = arm_mean(
        suite,
        "risk_coverage",
        "correlation",
        "spearman_variance_vs_probe_distance",
    )?;
    let detail = format!("seed-averaged spearman {rho:.4} (min {SPEARMAN_MIN})");
    if rho > SPEARMAN_MIN {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn criterion_risk_dominance(suite: &Suite, cfg: &ExperimentConfig) -> Result<Verdict> {
    let result = &suite.results["risk_coverage"];
    let variance = result.arm("variance").unwrap();
    let random = result.arm("random").unwrap();
    let mut misses = Vec::new();
    for coverage in [0.9, 0.8, 0.7] {
        let key = risk_key("tar", coverage);
        let v = &variance.metrics[&key];
        let r = &random.metrics[&key];
        for k in 0..cfg.world_seeds as usize {
            if v[k] < r[k] {
                misses.push(format!("seed {k} cov {coverage}: {:.4} < {:.4}", v[k], r[k]));
            }
        }
    }
    let full = mean(&variance.metrics[&risk_key("tar", 1.0)]);
    let at_09 = mean(&variance.metrics[&risk_key("tar", 0.9)]);
    let detail = format!(
        "variance >= random at every seed and coverage; curve {at_09:.4} at 0.9 vs {full:.4} at 1.0"
    );
    if misses.is_empty() && at_09 >= full {
        pass(detail)
    } else if misses.is_empty() {
        fail(detail)
    } else {
        fail(format!("dominance misses: {}", misses.join("; ")))
    }
}

fn criterion_model_update(suite: &Suite) -> Result<Verdict> {
    let key = far_key(HEADLINE_FAR);
    let mut before = BTreeMap::new();
    let mut after = BTreeMap::new();
    for size in [2usize, 4] {
        before.insert(size, arm_mean(suite, "model_update", &format!("before_size{size}"), &key)?);
        after.insert(size, arm_mean(suite, "model_update", &format!("after_size{size}"), &key)?);
    }
    let gains_ok = [2usize, 4].iter().all(|s| after[s] >= before[s] + UPDATE_GAIN_MIN);
    let sizes_ok = after[&4] >= after[&2] - ORDINAL_SLACK && before[&4] >= before[&2] - ORDINAL_SLACK;
    let detail = format!(
        "before {:.4}/{:.4}, after {:.4}/{:.4} at sizes 2/4 (gain min {UPDATE_GAIN_MIN})",
        before[&2], before[&4], after[&2], after[&4]
    );
    if gains_ok && sizes_ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

// ---------------------------------------------------------------------------
// Criterion 11: byte-identical reruns, exact file round-trips, suite budget.

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn criterion_determinism(ws: &Workspace, suite: &Suite, scratch: &Path) -> Result<Verdict> {
    if suite.wall > SUITE_BUDGET {
        return fail(format!("suite took {:?}, budget {SUITE_BUDGET:?}", suite.wall));
    }

    let before = tree_bytes(ws.root());
    run_suite(ws)?;
    let after = tree_bytes(ws.root());
    if before != after {
        let changed: Vec<String> = before
            .iter()
            .filter(|(p, bytes)| after.get(*p) != Some(bytes))
            .map(|(p, _)| p.display().to_string())
            .chain(after.keys().filter(|p| !before.contains_key(*p)).map(|p| p.display().to_string()))
            .take(5)
            .collect();
        return fail(format!("rerun changed {} file(s): {}", changed.len(), changed.join(", ")));
    }

    let seed_dir = ws.root().join("scenarios/ensemble_size");
    let probe = seed_dir.join("size2/seed0/probe_mated.cmce");
    let copy = scratch.join("roundtrip.cmce");
    write_embedding_set(&copy, &read_embedding_set(&probe)?)?;
    if fs::read(&probe)? != fs::read(&copy)? {
        return fail("embedding file round-trip changed bytes".to_string());
    }
    let transform = seed_dir.join("full/seed0/transform.cmct");
    let copy = scratch.join("roundtrip.cmct");
    write_trained_transform(&copy, &read_trained_transform(&transform)?)?;
    if fs::read(&transform)? != fs::read(&copy)? {
        return fail("transform file round-trip changed bytes".to_string());
    }

    pass(format!(
        "rerun byte-identical across {} files, round-trips exact, suite {:.0?}",
        before.len(),
        suite.wall
    ))
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance_criteria() {
    let cfg = ExperimentConfig::default();
    let tmp = tempfile::tempdir().unwrap();
    let ws = Workspace::prepare(&tmp.path().join("suite"), cfg.clone(), false).unwrap();

    let suite = run_suite(&ws).expect("scenario suite");

    let checks: Vec<(&str, Result<Verdict>)> = vec![
        ("01 gradient_check", criterion_gradients()),
        ("02 metric_oracles", criterion_oracles()),
        ("03 incompatible_spaces", criterion_incompatible_spaces(&cfg)),
        ("04 transform_recovery", criterion_recovery(&cfg)),
        ("05 ensemble_monotonicity", criterion_monotonicity(&suite, &cfg)),
        ("06 diversity_ordering", criterion_diversity(&suite)),
        ("07 fusion_variants", criterion_fusion(&suite)),
        ("08 uncertainty_correlation", criterion_correlation(&suite)),
        ("09 risk_coverage_dominance", criterion_risk_dominance(&suite, &cfg)),
        ("10 model_update", criterion_model_update(&suite)),
        ("11 determinism_and_formats", criterion_determinism(&ws, &suite, tmp.path())),
    ];

    let mut failures = Vec::new();
    for (name, outcome) in checks {
        match outcome {
            Ok(v) => {
                let status = if v.pass { "PASS" } else { "FAIL" };
                println!("criterion {name}: {status}  {}", v.detail);
                if !v.pass {
                    failures.push(format!("{name}: {}", v.detail));
                }
            }
            Err(e) => {
                println!("criterion {name}: FAIL  error: {e}");
                failures.push(format!("{name}: error: {e}"));
            }
        }
    }
    assert!(failures.is_empty(), "{} criteria failed:\n{}", failures.len(), failures.join("\n"));
}
