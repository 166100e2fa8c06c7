//! Named scenario runners. Each scenario replays one experiment design over
//! several world replicates, writes self-contained per-arm artifacts (every
//! arm directory can be re-evaluated with the eval verb to the same
//! numbers), and aggregates per-replicate metrics into a result file plus a
//! plot-ready report.
//!
//! Replicates run in parallel; every replicate writes only into its own
//! `<arm>/seed<k>` directories, and aggregation happens single-threaded
//! afterwards, so outputs do not depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use cmce_core::embedding::cosine_similarity;
use cmce_core::ensemble::FusedGalleryItem;
use cmce_core::evalproto::{export_report, spearman, Curve, CurvePoint, Report};
use cmce_core::synthworld::ArchFamily;
use cmce_core::transform::{
    write_trained_transform, TrainSpec, TrainVariant, TrainedTransform,
};
use cmce_core::{EmbeddingSet, Error, Result};

use crate::config::{train_seed, world_seed, ModelSpec, Role};
use crate::pipeline::{
    build_world, embed_classes, embed_split, eval_files, fuse_with_transform, spawn,
    train_to_file, write_arm_inputs, EmbedCounter, EvalMetrics, Split, Workspace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioName {
    EnsembleSize,
    Diversity,
    FusionVariants,
    RiskCoverage,
    ModelUpdate,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 5] = [
        ScenarioName::EnsembleSize,
        ScenarioName::Diversity,
        ScenarioName::FusionVariants,
        ScenarioName::RiskCoverage,
        ScenarioName::ModelUpdate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioName::EnsembleSize => "ensemble_size",
            ScenarioName::Diversity => "diversity",
            ScenarioName::FusionVariants => "fusion_variants",
            ScenarioName::RiskCoverage => "risk_coverage",
            ScenarioName::ModelUpdate => "model_update",
        }
    }
}

impl FromStr for ScenarioName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| {
                let known: Vec<&str> = ScenarioName::ALL.iter().map(|n| n.name()).collect();
                Error::invalid_config(format!(
                    "unknown scenario {s:?}; expected one of {}",
                    known.join(", ")
                ))
            })
    }
}

/// One experimental arm: per-replicate metric values plus their means.
/// `x` is the arm's plot coordinate (ensemble size for the size sweep, the
/// arm index elsewhere).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub x: f64,
    /// Derived world seeds, one per replicate, in replicate order. Metric
    /// vectors align with this list.
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Vec<f64>>,
    pub means: BTreeMap<String, f64>,
}

impl ArmResult {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.means.get(metric).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: String,
    pub tool_version: String,
    pub config_hash: String,
    pub description: String,
    pub arms: Vec<ArmResult>,
}

impl ScenarioResult {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

pub fn result_path(ws: &Workspace, name: ScenarioName) -> PathBuf {
    ws.root()
        .join("scenarios")
        .join(name.name())
        .join("result.json")
}

pub fn read_scenario_result(path: &Path) -> Result<ScenarioResult> {
    let raw = fs::read_to_string(path)?;
    serde_json::from_str(&raw).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn run_scenario(ws: &Workspace, name: ScenarioName) -> Result<ScenarioResult> {
    let result = match name {
        ScenarioName::EnsembleSize => ensemble_size(ws),
        ScenarioName::Diversity => diversity(ws),
        ScenarioName::FusionVariants => fusion_variants(ws),
        ScenarioName::RiskCoverage => risk_coverage(ws),
        ScenarioName::ModelUpdate => model_update(ws),
    }?;
    write_outputs(ws, &result)?;
    Ok(result)
}

pub fn far_key(far: f64) -> String {
    format!("open_set_tar_far_{far}")
}

pub fn risk_key(metric: &str, coverage: f64) -> String {
    format!("risk_{metric}_cov_{coverage}")
}

fn search_metrics(m: &EvalMetrics) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for &(far, tar, _) in &m.tar_by_far {
        out.insert(far_key(far), tar);
    }
    out.insert("recall_at_1".to_string(), m.recall_at_1);
    out
}

/// arm name -> metric name -> value, for one replicate.
type ArmMetrics = BTreeMap<String, BTreeMap<String, f64>>;

fn run_replicates<F>(ws: &Workspace, per_replicate: F) -> Result<Vec<ArmMetrics>>
where
    F: Fn(u32) -> Result<ArmMetrics> + Sync + Send,
{
    (0..ws.cfg.world_seeds)
        .into_par_iter()
        .map(per_replicate)
        .collect()
}

fn assemble(
    ws: &Workspace,
    name: ScenarioName,
    description: String,
    arm_order: &[(String, f64)],
    reps: Vec<ArmMetrics>,
) -> Result<ScenarioResult> {
    let seeds: Vec<u64> = (0..ws.cfg.world_seeds)
        .map(|k| world_seed(ws.cfg.master_seed, k))
        .collect();
    let mut arms = Vec::with_capacity(arm_order.len());
    for (arm_name, x) in arm_order {
        let mut metrics: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for rep in &reps {
            let arm_map = rep.get(arm_name).ok_or_else(|| {
                Error::format(format!("a replicate produced no metrics for arm {arm_name}"))
            })?;
            for (key, &value) in arm_map {
                metrics.entry(key.clone()).or_default().push(value);
            }
        }
        for (key, values) in &metrics {
            if values.len() != reps.len() {
                return Err(Error::format(format!(
                    "metric {key} of arm {arm_name} has {} values for {} replicates",
                    values.len(),
                    reps.len()
                )));
            }
        }
        let means = metrics
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        arms.push(ArmResult {
            arm: arm_name.clone(),
            x: *x,
            seeds: seeds.clone(),
            metrics,
            means,
        });
    }
    Ok(ScenarioResult {
        scenario: name.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: ws.hash().to_string(),
        description,
        arms,
    })
}

fn write_outputs(ws: &Workspace, result: &ScenarioResult) -> Result<()> {
    let dir = ws.scenario_dir(&result.scenario)?;
    let mut body = serde_json::to_string_pretty(result)
        .map_err(|e| Error::format(format!("scenario result: {e}")))?;
    body.push('\n');
    fs::write(dir.join("result.json"), body)?;

    let keys: BTreeSet<&String> = result
        .arms
        .iter()
        .flat_map(|a| a.means.keys())
        .collect();
    let curves = keys
        .into_iter()
        .map(|key| Curve {
            name: key.clone(),
            x_kind: "arm".to_string(),
            points: result
                .arms
                .iter()
                .filter_map(|a| {
                    a.mean(key).map(|value| CurvePoint {
                        x: a.x,
                        value,
                        policy: a.arm.clone(),
                        seed_count: a.seeds.len(),
                    })
                })
                .collect(),
        })
        .collect();
    let report = Report {
        config: json!({
            "scenario": result.scenario,
            "tool_version": result.tool_version,
            "config_hash": result.config_hash,
            "description": result.description,
        }),
        curves,
    };
    export_report(&report, &dir.join("report.json"), &dir.join("report.csv"))
}

/// The data splits one replicate derives from the configured roster before
/// any arm runs.
struct ReplicateBase {
    query_train: EmbeddingSet,
    mated: EmbeddingSet,
    nonmated: EmbeddingSet,
    gallery_train: Vec<EmbeddingSet>,
    gallery_sets: Vec<EmbeddingSet>,
}

fn replicate_base(ws: &Workspace, k: u32, counter: &mut EmbedCounter) -> Result<ReplicateBase> {
    let cfg = &ws.cfg;
    let world = build_world(cfg, k)?;
    let query = spawn(cfg, &world, cfg.query_model(), k)?;
    let mut gallery = Vec::new();
    for spec in cfg.gallery_models() {
        gallery.push(spawn(cfg, &world, spec, k)?);
    }
    let query_train = embed_split(&world, &query, Split::Train, &cfg.split, counter)?;
    let mated = embed_split(&world, &query, Split::ProbeMated, &cfg.split, counter)?;
    let nonmated = embed_split(&world, &query, Split::ProbeNonmated, &cfg.split, counter)?;
    let mut gallery_train = Vec::new();
    let mut gallery_sets = Vec::new();
    for model in &gallery {
        gallery_train.push(embed_split(&world, model, Split::Train, &cfg.split, counter)?);
        gallery_sets.push(embed_split(&world, model, Split::Gallery, &cfg.split, counter)?);
    }
    Ok(ReplicateBase {
        query_train,
        mated,
        nonmated,
        gallery_train,
        gallery_sets,
    })
}

/// The size-k view of an m2m training over a larger roster: the first k
/// nets, heads and model ids. Only meaningful for m2m, whose runs are
/// independent per gallery model.
fn prefix_transform(full: &TrainedTransform, size: usize) -> TrainedTransform {
    TrainedTransform {
        variant: full.variant,
        gallery_model_ids: full.gallery_model_ids[..size].to_vec(),
        query_model_id: full.query_model_id.clone(),
        nets: full.nets[..size].to_vec(),
        query_net: full.query_net.clone(),
        heads: full.heads[..size].to_vec(),
        loss_history: full.loss_history.clone(),
        cfg: full.cfg.clone(),
    }
}

/// Fuse with `trained`, write the arm's inputs next to its report, evaluate
/// the stored files, and return the headline metrics.
#[allow(clippy::too_many_arguments)]
fn fuse_and_eval(
    ws: &Workspace,
    seed_dir: &Path,
    trained: &TrainedTransform,
    gallery_sets: &[EmbeddingSet],
    mated: &EmbeddingSet,
    nonmated: &EmbeddingSet,
) -> Result<EvalMetrics> {
    let items = fuse_with_transform(trained, gallery_sets, ws.cfg.eval.metric)?;
    let mut paths = write_arm_inputs(
        seed_dir,
        &trained.query_model_id,
        &items,
        mated,
        nonmated,
    )?;
    if trained.query_net.is_some() {
        paths.transform = Some(seed_dir.join("transform.cmct"));
    }
    eval_files(ws, &paths, seed_dir, "eval")
}

fn ensemble_size(ws: &Workspace) -> Result<ScenarioResult> {
    let cfg = &ws.cfg;
    let dir = ws.scenario_dir(ScenarioName::EnsembleSize.name())?;
    let sizes = cfg.ensemble_sizes.clone();
    let arms: Vec<(String, f64)> = sizes
        .iter()
        .map(|&s| (format!("size{s}"), s as f64))
        .collect();

    let reps = run_replicates(ws, |k| {
        let mut counter = EmbedCounter::default();
        let base = replicate_base(ws, k, &mut counter)?;
        let mut tc = cfg.train_config(TrainVariant::M2m);
        tc.seed = train_seed(cfg.master_seed, "ensemble_size/full", tc.seed, k);
        let full = train_to_file(
            &TrainSpec {
                variant: TrainVariant::M2m,
                gallery_sets: base.gallery_train.iter().collect(),
                query_set: &base.query_train,
                cfg: tc,
            },
            &dir.join(format!("full/seed{k}/transform.cmct")),
        )?;
        let mut out = ArmMetrics::new();
        for &s in &sizes {
            let seed_dir = dir.join(format!("size{s}/seed{k}"));
            fs::create_dir_all(&seed_dir)?;
            let sliced = prefix_transform(&full, s);
            write_trained_transform(&seed_dir.join("transform.cmct"), &sliced)?;
            let m = fuse_and_eval(
                ws,
                &seed_dir,
                &sliced,
                &base.gallery_sets[..s],
                &base.mated,
                &base.nonmated,
            )?;
            out.insert(format!("size{s}"), search_metrics(&m));
        }
        Ok(out)
    })?;

    let description = format!(
        "Sweeps nested ensemble sizes {sizes:?} over the gallery roster. Each replicate \
         trains m2m once on the full roster; every size arm reuses the first k nets and \
         gallery models of that training, so smaller ensembles are exact prefixes of the \
         largest one."
    );
    assemble(ws, ScenarioName::EnsembleSize, description, &arms, reps)
}

fn diversity(ws: &Workspace) -> Result<ScenarioResult> {
    let cfg = &ws.cfg;
    let members = *cfg.ensemble_sizes.last().expect("validated non-empty");
    if members < 2 {
        return Err(Error::invalid_config(
            "the diversity scenario needs a largest ensemble size of at least 2",
        ));
    }
    let dir = ws.scenario_dir(ScenarioName::Diversity.name())?;
    let arms: Vec<(String, f64)> = ["transform_seeds", "gallery_models", "architectures"]
        .iter()
        .enumerate()
        .map(|(i, a)| (a.to_string(), i as f64))
        .collect();
    let base_spec = cfg.gallery_models()[0].clone();
    let family_cycle = [ArchFamily::A, ArchFamily::B, ArchFamily::C];
    let start = family_cycle
        .iter()
        .position(|f| *f == base_spec.family)
        .unwrap_or(0);

    let synth_specs = |suffix: &str, vary_family: bool| -> Vec<ModelSpec> {
        (0..members)
            .map(|i| ModelSpec {
                name: format!("{}-{suffix}{i}", base_spec.name),
                family: if vary_family {
                    family_cycle[(start + i) % family_cycle.len()]
                } else {
                    base_spec.family
                },
                out_dim: base_spec.out_dim,
                noise_sigma: base_spec.noise_sigma,
                seed: base_spec.seed,
                role: Role::Gallery,
            })
            .collect()
    };
    let gallery_seed_specs = synth_specs("g", false);
    let arch_specs = synth_specs("x", true);

    let reps = run_replicates(ws, |k| {
        let mut counter = EmbedCounter::default();
        let world = build_world(cfg, k)?;
        let query = spawn(cfg, &world, cfg.query_model(), k)?;
        let query_train = embed_split(&world, &query, Split::Train, &cfg.split, &mut counter)?;
        let mated = embed_split(&world, &query, Split::ProbeMated, &cfg.split, &mut counter)?;
        let nonmated =
            embed_split(&world, &query, Split::ProbeNonmated, &cfg.split, &mut counter)?;

        let mut arm_sets = Vec::new();
        let base_model = spawn(cfg, &world, &base_spec, k)?;
        let base_train = embed_split(&world, &base_model, Split::Train, &cfg.split, &mut counter)?;
        let base_gallery =
            embed_split(&world, &base_model, Split::Gallery, &cfg.split, &mut counter)?;
        arm_sets.push((
            "transform_seeds",
            vec![base_train; members],
            vec![base_gallery; members],
        ));
        for (arm, specs) in [
            ("gallery_models", &gallery_seed_specs),
            ("architectures", &arch_specs),
        ] {
            let mut train_sets = Vec::new();
            let mut gallery_sets = Vec::new();
            for spec in specs {
                let model = spawn(cfg, &world, spec, k)?;
                train_sets.push(embed_split(&world, &model, Split::Train, &cfg.split, &mut counter)?);
                gallery_sets.push(embed_split(
                    &world,
                    &model,
                    Split::Gallery,
                    &cfg.split,
                    &mut counter,
                )?);
            }
            arm_sets.push((arm, train_sets, gallery_sets));
        }

        let mut out = ArmMetrics::new();
        for (arm, train_sets, gallery_sets) in &arm_sets {
            let seed_dir = dir.join(format!("{arm}/seed{k}"));
            let mut tc = cfg.train_config(TrainVariant::M2m);
            tc.seed = train_seed(cfg.master_seed, &format!("diversity/{arm}"), tc.seed, k);
            let trained = train_to_file(
                &TrainSpec {
                    variant: TrainVariant::M2m,
                    gallery_sets: train_sets.iter().collect(),
                    query_set: &query_train,
                    cfg: tc,
                },
                &seed_dir.join("transform.cmct"),
            )?;
            let m = fuse_and_eval(ws, &seed_dir, &trained, gallery_sets, &mated, &nonmated)?;
            let mut metrics = search_metrics(&m);
            let items = crate::pipeline::stored_variances(&seed_dir.join("fused.cmce"))?;
            let mean_var =
                items.iter().map(|(_, v)| v).sum::<f64>() / items.len().max(1) as f64;
            metrics.insert("mean_item_variance".to_string(), mean_var);
            out.insert(arm.to_string(), metrics);
        }
        Ok(out)
    })?;

    let description = format!(
        "Builds a {members}-member ensemble three ways around gallery model {:?}: varying \
         only the transform training runs on one fixed model, varying the gallery model \
         weights within one architecture family, and varying the architecture family \
         itself. Records retrieval quality and mean member disagreement per arm.",
        base_spec.name
    );
    assemble(ws, ScenarioName::Diversity, description, &arms, reps)
}

fn fusion_variants(ws: &Workspace) -> Result<ScenarioResult> {
    let cfg = &ws.cfg;
    let dir = ws.scenario_dir(ScenarioName::FusionVariants.name())?;
    let variants = [
        TrainVariant::M2m,
        TrainVariant::E2eMean,
        TrainVariant::E2eWeighted,
        TrainVariant::Concat,
    ];
    let arms: Vec<(String, f64)> = variants
        .iter()
        .enumerate()
        .map(|(i, v)| (v.name().to_string(), i as f64))
        .collect();

    let reps = run_replicates(ws, |k| {
        let mut counter = EmbedCounter::default();
        let base = replicate_base(ws, k, &mut counter)?;
        let mut out = ArmMetrics::new();
        for variant in variants {
            let arm = variant.name();
            let seed_dir = dir.join(format!("{arm}/seed{k}"));
            let mut tc = cfg.train_config(variant);
            tc.seed = train_seed(cfg.master_seed, &format!("fusion_variants/{arm}"), tc.seed, k);
            let trained = train_to_file(
                &TrainSpec {
                    variant,
                    gallery_sets: base.gallery_train.iter().collect(),
                    query_set: &base.query_train,
                    cfg: tc,
                },
                &seed_dir.join("transform.cmct"),
            )?;
            let m = fuse_and_eval(
                ws,
                &seed_dir,
                &trained,
                &base.gallery_sets,
                &base.mated,
                &base.nonmated,
            )?;
            out.insert(arm.to_string(), search_metrics(&m));
        }
        Ok(out)
    })?;

    let description = "Trains every multi-model fusion variant (independent per-model runs, \
                       end-to-end mean, end-to-end weighted, concatenation) on the same \
                       roster and data, then scores the fused galleries under one protocol."
        .to_string();
    assemble(ws, ScenarioName::FusionVariants, description, &arms, reps)
}

/// Mean cosine distance from each fused item to the mated probes of its own
/// class; the quality proxy the variance ranking is correlated against.
fn variance_quality_spearman(items: &[FusedGalleryItem], mated: &EmbeddingSet) -> Result<f64> {
    let mut by_class: BTreeMap<u32, Vec<&cmce_core::EmbeddingVector>> = BTreeMap::new();
    for it in mated.items() {
        by_class.entry(it.class_label).or_default().push(&it.vector);
    }
    let mut variances = Vec::with_capacity(items.len());
    let mut distances = Vec::with_capacity(items.len());
    for it in items {
        let variance = it
            .variance
            .ok_or(Error::InsufficientModels(1))?;
        let probes = by_class.get(&it.class_label).ok_or_else(|| {
            Error::invalid_config(format!("no mated probes for class {}", it.class_label))
        })?;
        let distance = match it.normalized() {
            Some(fused) => {
                let mut total = 0.0;
                for probe in probes {
                    total += 1.0 - cosine_similarity(&fused, probe)?;
                }
                total / probes.len() as f64
            }
            None => 2.0,
        };
        variances.push(variance);
        distances.push(distance);
    }
    spearman(&variances, &distances)
}

fn risk_coverage(ws: &Workspace) -> Result<ScenarioResult> {
    let cfg = &ws.cfg;
    if cfg.gallery_models().len() < 2 {
        return Err(Error::invalid_config(
            "the risk_coverage scenario needs at least two gallery models",
        ));
    }
    let dir = ws.scenario_dir(ScenarioName::RiskCoverage.name())?;
    let arms: Vec<(String, f64)> = ["variance", "random", "correlation"]
        .iter()
        .enumerate()
        .map(|(i, a)| (a.to_string(), i as f64))
        .collect();

    let reps = run_replicates(ws, |k| {
        let mut counter = EmbedCounter::default();
        let base = replicate_base(ws, k, &mut counter)?;
        let seed_dir = dir.join(format!("full/seed{k}"));
        // Two independently seeded transforms per gallery model, trained
        // for three eighths of the configured schedule. Fully trained
        // transforms fuse nearly every item cleanly at this scale, leaving
        // rejection nothing to rank; the underfit maps spread residual
        // error across items, and the duplicated members sharpen each
        // item's variance estimate with same-input disagreement.
        let mut tc = cfg.train_config(TrainVariant::M2m);
        tc.seed = train_seed(cfg.master_seed, "risk_coverage/full", tc.seed, k);
        tc.epochs = (tc.epochs * 3 / 8).max(1);
        let doubled_train: Vec<&EmbeddingSet> = base
            .gallery_train
            .iter()
            .chain(base.gallery_train.iter())
            .collect();
        let trained = train_to_file(
            &TrainSpec {
                variant: TrainVariant::M2m,
                gallery_sets: doubled_train,
                query_set: &base.query_train,
                cfg: tc,
            },
            &seed_dir.join("transform.cmct"),
        )?;
        let doubled_sets: Vec<EmbeddingSet> = base
            .gallery_sets
            .iter()
            .chain(base.gallery_sets.iter())
            .cloned()
            .collect();
        let items = fuse_with_transform(&trained, &doubled_sets, cfg.eval.metric)?;
        let paths = write_arm_inputs(
            &seed_dir,
            &trained.query_model_id,
            &items,
            &base.mated,
            &base.nonmated,
        )?;
        let m = eval_files(ws, &paths, &seed_dir, "eval")?;

        let mut variance_arm = BTreeMap::new();
        let mut random_arm = BTreeMap::new();
        for (metric, points) in [("tar", &m.risk_tar), ("recall", &m.risk_recall)] {
            for p in points {
                let key = risk_key(metric, p.coverage);
                match p.policy.as_str() {
                    "variance" => variance_arm.insert(key, p.metric_value),
                    _ => random_arm.insert(key, p.metric_value),
                };
            }
        }
        let rho = variance_quality_spearman(&items, &base.mated)?;
        let mut correlation = BTreeMap::new();
        correlation.insert("spearman_variance_vs_probe_distance".to_string(), rho);

        let mut out = ArmMetrics::new();
        out.insert("variance".to_string(), variance_arm);
        out.insert("random".to_string(), random_arm);
        out.insert("correlation".to_string(), correlation);
        Ok(out)
    })?;

    let description = format!(
        "Rejects gallery items by descending member disagreement and compares open-set TAR \
         (at FAR {}) and Recall@1 against a {}-seed random-rejection baseline across \
         coverages {:?}; also reports the Spearman correlation between an item's variance \
         and its mean cosine distance to its own mated probes. Each gallery model \
         contributes two independently seeded transforms trained for three eighths of \
         the configured schedule, so that fused quality varies enough for a rejection \
         ranking to matter and every item's variance is estimated from eight members.",
        cfg.eval.primary_far,
        cfg.eval.random_rejection_seeds,
        cfg.eval.coverages,
    );
    assemble(ws, ScenarioName::RiskCoverage, description, &arms, reps)
}

fn filter_classes(set: &EmbeddingSet, classes: Range<u32>) -> Result<EmbeddingSet> {
    let mut out = EmbeddingSet::new(set.model_id(), set.dim())?;
    for item in set.items() {
        if classes.contains(&item.class_label) {
            out.push(item.clone())?;
        }
    }
    Ok(out)
}

fn model_update(ws: &Workspace) -> Result<ScenarioResult> {
    let cfg = &ws.cfg;
    let half = cfg.split.train_classes / 2;
    if half < 2 {
        return Err(Error::invalid_config(
            "the model_update scenario needs at least 4 train classes",
        ));
    }
    let dir = ws.scenario_dir(ScenarioName::ModelUpdate.name())?;
    let sizes = cfg.ensemble_sizes.clone();
    let mut arms: Vec<(String, f64)> = Vec::new();
    for &s in &sizes {
        arms.push((format!("before_size{s}"), s as f64));
    }
    for &s in &sizes {
        arms.push((format!("after_size{s}"), s as f64));
    }
    let old_spec = cfg.query_model().clone();
    let new_spec = ModelSpec {
        name: format!("{}-next", old_spec.name),
        ..old_spec.clone()
    };

    let reps = run_replicates(ws, |k| {
        let mut counter = EmbedCounter::default();
        let world = build_world(cfg, k)?;
        let old_query = spawn(cfg, &world, &old_spec, k)?;
        let new_query = spawn(cfg, &world, &new_spec, k)?;
        let mut gallery = Vec::new();
        for spec in cfg.gallery_models() {
            gallery.push(spawn(cfg, &world, spec, k)?);
        }

        // The stored gallery: embedded once by the outgoing roster, shared
        // by every arm.
        let mut gallery_train = Vec::new();
        let mut gallery_sets = Vec::new();
        for model in &gallery {
            gallery_train.push(embed_split(&world, model, Split::Train, &cfg.split, &mut counter)?);
            gallery_sets.push(embed_split(&world, model, Split::Gallery, &cfg.split, &mut counter)?);
        }

        let spc = cfg.split.samples_per_class;
        let old_train = embed_classes(
            &world,
            &old_query,
            Split::Train.name(),
            0..half,
            spc,
            0,
            &mut counter,
        )?;
        let old_mated = embed_split(&world, &old_query, Split::ProbeMated, &cfg.split, &mut counter)?;
        let old_nonmated =
            embed_split(&world, &old_query, Split::ProbeNonmated, &cfg.split, &mut counter)?;
        let new_train = embed_split(&world, &new_query, Split::Train, &cfg.split, &mut counter)?;
        let new_mated = embed_split(&world, &new_query, Split::ProbeMated, &cfg.split, &mut counter)?;
        let new_nonmated =
            embed_split(&world, &new_query, Split::ProbeNonmated, &cfg.split, &mut counter)?;

        let gallery_train_half: Vec<EmbeddingSet> = gallery_train
            .iter()
            .map(|set| filter_classes(set, 0..half))
            .collect::<Result<_>>()?;

        let mut tc_before = cfg.train_config(TrainVariant::M2m);
        tc_before.seed = train_seed(cfg.master_seed, "model_update/before", tc_before.seed, k);
        let before = train_to_file(
            &TrainSpec {
                variant: TrainVariant::M2m,
                gallery_sets: gallery_train_half.iter().collect(),
                query_set: &old_train,
                cfg: tc_before,
            },
            &dir.join(format!("before/seed{k}/transform.cmct")),
        )?;
        let mut tc_after = cfg.train_config(TrainVariant::M2m);
        tc_after.seed = train_seed(cfg.master_seed, "model_update/after", tc_after.seed, k);
        let after = train_to_file(
            &TrainSpec {
                variant: TrainVariant::M2m,
                gallery_sets: gallery_train.iter().collect(),
                query_set: &new_train,
                cfg: tc_after,
            },
            &dir.join(format!("after/seed{k}/transform.cmct")),
        )?;

        let backfills = counter.count(new_query.model_id(), Split::Gallery.name());
        if backfills != 0 {
            return Err(Error::format(format!(
                "model {} embedded {backfills} gallery samples; the stored gallery must \
                 never be re-embedded",
                new_query.model_id()
            )));
        }
        let enrolled =
            (cfg.split.gallery_classes * cfg.split.samples_per_class) as u64;
        for model in &gallery {
            let got = counter.count(model.model_id(), Split::Gallery.name());
            if got != enrolled {
                return Err(Error::format(format!(
                    "model {} embedded the gallery {got} times, expected exactly {enrolled}",
                    model.model_id()
                )));
            }
        }

        let mut out = ArmMetrics::new();
        for &s in &sizes {
            for (phase, full, mated, nonmated) in [
                ("before", &before, &old_mated, &old_nonmated),
                ("after", &after, &new_mated, &new_nonmated),
            ] {
                let arm = format!("{phase}_size{s}");
                let seed_dir = dir.join(format!("{arm}/seed{k}"));
                fs::create_dir_all(&seed_dir)?;
                let sliced = prefix_transform(full, s);
                write_trained_transform(&seed_dir.join("transform.cmct"), &sliced)?;
                let m = fuse_and_eval(
                    ws,
                    &seed_dir,
                    &sliced,
                    &gallery_sets[..s],
                    mated,
                    nonmated,
                )?;
                let mut metrics = search_metrics(&m);
                if phase == "after" {
                    metrics.insert("new_query_gallery_embeds".to_string(), backfills as f64);
                }
                out.insert(arm, metrics);
            }
        }
        Ok(out)
    })?;

    let description = format!(
        "Swaps the query model without touching the stored gallery. The outgoing model's \
         transforms train on the first {half} of {} train classes; the replacement model \
         {:?} trains on all of them, standing in for an update with wider training \
         coverage. Both phases search the same gallery embeddings, produced once by the \
         outgoing roster, and an embed-call counter verifies the replacement model never \
         embeds a gallery sample.",
        cfg.split.train_classes, new_spec.name
    );
    assemble(ws, ScenarioName::ModelUpdate, description, &arms, reps)
}
