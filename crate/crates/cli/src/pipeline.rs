//! File-level pipeline stages shared by the plain verbs and the scenario
//! runners: artifact layout, embedding generation, transform training,
//! fusion and evaluation.
//!
//! Trained transforms are always written to disk and reloaded before they
//! touch a gallery. Parameter files store f32, so this canonicalizes the
//! parameters once and makes every downstream number reproducible from the
//! stored artifacts alone.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde_json::json;

use cmce_core::embedding::{DistanceMetric, EPS_NORM};
use cmce_core::ensemble::{
    fused_sidecar_path, read_fused_gallery, write_fused_gallery, FusedGalleryItem,
    TransformedStack,
};
use cmce_core::evalproto::{
    export_report, open_set_search_eval, recall_at_1, risk_coverage_open_set,
    risk_coverage_recall, Curve, CurvePoint, GalleryIndex, LabeledQuery, ProbeSet, Report,
    RiskCoveragePoint, RiskPolicy,
};
use cmce_core::format::{read_embedding_set, write_embedding_set};
use cmce_core::synthworld::{
    encode_item_id, make_world, spawn_model, LatentWorld, ModelConfig, SampleSpec, SynthModel,
    WorldConfig,
};
use cmce_core::transform::{
    read_trained_transform, train, write_trained_transform, TrainSpec, TrainVariant,
    TrainedTransform,
};
use cmce_core::{
    ensemble, EmbeddingItem, EmbeddingSet, EmbeddingVector, Error, Result,
};

use crate::config::{
    model_seed, rejection_seeds, train_seed, world_seed, ExperimentConfig, ModelSpec,
    SplitSpec,
};

/// The four sample populations of one experiment. Gallery and mated probes
/// share classes but use disjoint sample id blocks; nonmated probes use
/// classes absent from the gallery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Gallery,
    ProbeMated,
    ProbeNonmated,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Train,
        Split::Gallery,
        Split::ProbeMated,
        Split::ProbeNonmated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::ProbeMated => "probe_mated",
            Split::ProbeNonmated => "probe_nonmated",
        }
    }

    pub fn classes(self, s: &SplitSpec) -> Range<u32> {
        let gallery_end = s.train_classes + s.gallery_classes;
        match self {
            Split::Train => 0..s.train_classes,
            Split::Gallery | Split::ProbeMated => s.train_classes..gallery_end,
            Split::ProbeNonmated => gallery_end..gallery_end + s.nonmated_classes,
        }
    }

    pub fn sample_offset(self, s: &SplitSpec) -> u32 {
        match self {
            Split::ProbeMated => s.samples_per_class,
            _ => 0,
        }
    }
}

/// Counts actual `embed()` invocations per (model, split tag). The model
/// update scenario uses it to prove the no-backfilling contract: the new
/// query model must never embed a gallery-split sample.
#[derive(Debug, Default, Clone)]
pub struct EmbedCounter {
    counts: BTreeMap<(String, String), u64>,
}

impl EmbedCounter {
    pub fn count(&self, model: &str, tag: &str) -> u64 {
        *self
            .counts
            .get(&(model.to_string(), tag.to_string()))
            .unwrap_or(&0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    fn add(&mut self, model: &str, tag: &str) {
        *self
            .counts
            .entry((model.to_string(), tag.to_string()))
            .or_insert(0) += 1;
    }
}

/// Embed `samples_per_class` samples of each class in `classes`, counting
/// every individual `embed()` call against `(model, tag)`.
pub fn embed_classes(
    world: &LatentWorld,
    model: &SynthModel,
    tag: &str,
    classes: Range<u32>,
    samples_per_class: u32,
    id_offset: u32,
    counter: &mut EmbedCounter,
) -> Result<EmbeddingSet> {
    let mut set = EmbeddingSet::new(model.model_id(), model.out_dim())?;
    for class in classes {
        for k in 0..samples_per_class {
            let sample_id = id_offset + k;
            let spec = SampleSpec {
                class_label: class,
                sample_id,
            };
            let vector = model.embed(world, spec)?;
            counter.add(model.model_id(), tag);
            set.push(EmbeddingItem {
                item_id: encode_item_id(class, sample_id)?,
                class_label: class,
                vector,
            })?;
        }
    }
    Ok(set)
}

pub fn embed_split(
    world: &LatentWorld,
    model: &SynthModel,
    split: Split,
    s: &SplitSpec,
    counter: &mut EmbedCounter,
) -> Result<EmbeddingSet> {
    embed_classes(
        world,
        model,
        split.name(),
        split.classes(s),
        s.samples_per_class,
        split.sample_offset(s),
        counter,
    )
}

pub fn build_world(cfg: &ExperimentConfig, replicate: u32) -> Result<LatentWorld> {
    make_world(WorldConfig {
        latent_dim: cfg.world.latent_dim,
        num_classes: cfg.world.num_classes,
        intra_class_spread: cfg.world.intra_class_spread,
        seed: world_seed(cfg.master_seed, replicate),
    })
}

pub fn spawn(
    cfg: &ExperimentConfig,
    world: &LatentWorld,
    spec: &ModelSpec,
    replicate: u32,
) -> Result<SynthModel> {
    spawn_model(
        world,
        ModelConfig {
            model_id: spec.name.clone(),
            arch_family: spec.family,
            out_dim: spec.out_dim,
            noise_sigma: spec.noise_sigma,
            seed: model_seed(cfg.master_seed, &spec.name, spec.seed, replicate),
        },
    )
}

/// An output directory bound to one experiment. Preparing it enforces the
/// config-hash guard: a directory already holding artifacts of a different
/// configuration is refused unless `force` is set.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
    pub cfg: ExperimentConfig,
    hash: String,
}

impl Workspace {
    pub fn prepare(root: &Path, cfg: ExperimentConfig, force: bool) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        fs::create_dir_all(root)?;
        let config_path = root.join("config.json");
        if config_path.exists() && !force {
            let raw = fs::read_to_string(&config_path)?;
            let stored: ExperimentConfig = serde_json::from_str(&raw)
                .map_err(|e| Error::format(format!("{}: {e}", config_path.display())))?;
            if stored.hash() != hash {
                return Err(Error::invalid_config(format!(
                    "{} holds artifacts of a different configuration; pass --force to overwrite",
                    root.display()
                )));
            }
        }
        let mut echo = serde_json::to_string_pretty(&cfg).expect("config serializes");
        echo.push('\n');
        fs::write(&config_path, echo)?;
        Ok(Self {
            root: root.to_path_buf(),
            cfg,
            hash,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn embedding_path(&self, model: &str, split: Split) -> PathBuf {
        self.root
            .join("embeddings")
            .join(format!("{model}__{}.cmce", split.name()))
    }

    pub fn transform_path(&self, variant: TrainVariant) -> PathBuf {
        self.root
            .join("transforms")
            .join(format!("{}.cmct", variant.name()))
    }

    pub fn fused_path(&self, variant: TrainVariant) -> PathBuf {
        self.root.join("fused").join(format!("{}.cmce", variant.name()))
    }

    pub fn reports_dir(&self) -> Result<PathBuf> {
        self.subdir("reports")
    }

    pub fn scenario_dir(&self, name: &str) -> Result<PathBuf> {
        self.subdir(&format!("scenarios/{name}"))
    }
}

fn missing(path: &Path, hint: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::NotFound,
        format!("{}: not found; {hint}", path.display()),
    ))
}

fn read_set_at(path: &Path) -> Result<EmbeddingSet> {
    if !path.exists() {
        return Err(missing(path, "run synth-gen first"));
    }
    read_embedding_set(path)
}

/// Writes one embedding set per (model, split) for replicate 0 of the
/// configured world. Reruns rewrite byte-identical files.
pub fn cmd_synth_gen(ws: &Workspace) -> Result<EmbedCounter> {
    let cfg = &ws.cfg;
    let world = build_world(cfg, 0)?;
    ws.subdir("embeddings")?;
    let mut counter = EmbedCounter::default();
    for spec in &cfg.models {
        let model = spawn(cfg, &world, spec, 0)?;
        for split in Split::ALL {
            let set = embed_split(&world, &model, split, &cfg.split, &mut counter)?;
            write_embedding_set(&ws.embedding_path(&spec.name, split), &set)?;
        }
    }
    Ok(counter)
}

fn ensure_embeddings(ws: &Workspace) -> Result<()> {
    let all_present = ws.cfg.models.iter().all(|m| {
        Split::ALL
            .iter()
            .all(|&s| ws.embedding_path(&m.name, s).exists())
    });
    if !all_present {
        cmd_synth_gen(ws)?;
    }
    Ok(())
}

/// Trains the configured variant on the train split and stores it. The
/// unified variant pairs the first gallery model with the query model; every
/// other variant trains over the full gallery roster.
pub fn cmd_train_transform(ws: &Workspace) -> Result<PathBuf> {
    let cfg = &ws.cfg;
    let variant = cfg.variant;
    ensure_embeddings(ws)?;
    let query_train = read_set_at(&ws.embedding_path(&cfg.query_model().name, Split::Train))?;
    let gallery_names: Vec<&ModelSpec> = match variant {
        TrainVariant::Unified => vec![cfg.gallery_models()[0]],
        _ => cfg.gallery_models(),
    };
    let gallery_train: Vec<EmbeddingSet> = gallery_names
        .iter()
        .map(|m| read_set_at(&ws.embedding_path(&m.name, Split::Train)))
        .collect::<Result<_>>()?;
    let mut tc = cfg.train_config(variant);
    tc.seed = train_seed(
        cfg.master_seed,
        &format!("pipeline/{}", variant.name()),
        tc.seed,
        0,
    );
    let trained = train(&TrainSpec {
        variant,
        gallery_sets: gallery_train.iter().collect(),
        query_set: &query_train,
        cfg: tc,
    })?;
    ws.subdir("transforms")?;
    let path = ws.transform_path(variant);
    write_trained_transform(&path, &trained)?;
    Ok(path)
}

/// Applies a trained transform to aligned gallery sets and fuses each item.
/// `sets` must be ordered exactly as the transform's gallery model ids.
pub fn fuse_with_transform(
    trained: &TrainedTransform,
    sets: &[EmbeddingSet],
    metric: DistanceMetric,
) -> Result<Vec<FusedGalleryItem>> {
    if sets.len() != trained.gallery_model_ids.len() {
        return Err(Error::invalid_config(format!(
            "transform expects {} gallery sets, got {}",
            trained.gallery_model_ids.len(),
            sets.len()
        )));
    }
    for (set, id) in sets.iter().zip(&trained.gallery_model_ids) {
        if set.model_id() != id {
            return Err(Error::invalid_config(format!(
                "gallery set order mismatch: expected model {id}, got {}",
                set.model_id()
            )));
        }
    }
    let first = &sets[0];
    for set in &sets[1..] {
        if set.len() != first.len() {
            return Err(Error::invalid_config(format!(
                "set {} has {} items, expected {}",
                set.model_id(),
                set.len(),
                first.len()
            )));
        }
    }
    let mut order: Vec<(u32, u32)> = first
        .items()
        .iter()
        .map(|it| (it.item_id, it.class_label))
        .collect();
    order.sort_unstable_by_key(|r| r.0);
    let by_id: Vec<HashMap<u32, &EmbeddingItem>> = sets
        .iter()
        .map(|s| s.items().iter().map(|it| (it.item_id, it)).collect())
        .collect();

    let mut fused = Vec::with_capacity(order.len());
    for (item_id, class_label) in order {
        let mut per_model = Vec::with_capacity(sets.len());
        for (set, map) in sets.iter().zip(&by_id) {
            let item = map.get(&item_id).ok_or_else(|| {
                Error::invalid_config(format!(
                    "set {} is missing item {item_id}",
                    set.model_id()
                ))
            })?;
            if item.class_label != class_label {
                return Err(Error::invalid_config(format!(
                    "item {item_id} labeled {class_label} in set {} but {} in set {}",
                    first.model_id(),
                    item.class_label,
                    set.model_id()
                )));
            }
            per_model.push(item.vector.values());
        }
        let (mean, members) = trained.transform_gallery_item(&per_model)?;
        let vector = EmbeddingVector::new(mean)?.quantize_f32();
        let degenerate = vector.norm() <= EPS_NORM;
        let variance = if members.len() >= 2 {
            let stack = TransformedStack::new(
                item_id,
                class_label,
                members
                    .into_iter()
                    .map(EmbeddingVector::new)
                    .collect::<Result<_>>()?,
                trained.gallery_model_ids.clone(),
            )?;
            Some(ensemble::variance_with_metric(&stack, metric)?)
        } else {
            None
        };
        fused.push(FusedGalleryItem {
            item_id,
            class_label,
            fused: vector,
            degenerate,
            variance,
            contributing_models: trained.gallery_model_ids.clone(),
        });
    }
    Ok(fused)
}

/// Reads the stored transform, applies it to the stored gallery sets and
/// writes the fused gallery with its uncertainty sidecar.
pub fn cmd_fuse(ws: &Workspace) -> Result<PathBuf> {
    let cfg = &ws.cfg;
    let transform_path = ws.transform_path(cfg.variant);
    if !transform_path.exists() {
        return Err(missing(&transform_path, "run train-transform first"));
    }
    let trained = read_trained_transform(&transform_path)?;
    ensure_embeddings(ws)?;
    let sets: Vec<EmbeddingSet> = trained
        .gallery_model_ids
        .iter()
        .map(|name| read_set_at(&ws.embedding_path(name, Split::Gallery)))
        .collect::<Result<_>>()?;
    let items = fuse_with_transform(&trained, &sets, cfg.eval.metric)?;
    ws.subdir("fused")?;
    let path = ws.fused_path(cfg.variant);
    write_fused_gallery(&path, &trained.query_model_id, &items)?;
    Ok(path)
}

/// Input files of one evaluation. `transform` is only needed for variants
/// that map the query side (unified).
#[derive(Debug, Clone)]
pub struct EvalPaths {
    pub fused: PathBuf,
    pub mated: PathBuf,
    pub nonmated: PathBuf,
    pub transform: Option<PathBuf>,
}

/// Scalar metrics of one evaluation, as exported to the report files.
#[derive(Debug, Clone)]
pub struct EvalMetrics {
    /// One `(far_target, tar, achieved_far)` row per configured FAR.
    pub tar_by_far: Vec<(f64, f64, f64)>,
    pub recall_at_1: f64,
    /// Empty when the gallery has no per-item variance (single-member
    /// ensembles and concatenation galleries).
    pub risk_tar: Vec<RiskCoveragePoint>,
    pub risk_recall: Vec<RiskCoveragePoint>,
}

impl EvalMetrics {
    pub fn tar_at(&self, far: f64) -> Option<f64> {
        self.tar_by_far
            .iter()
            .find(|(target, _, _)| *target == far)
            .map(|(_, tar, _)| *tar)
    }
}

fn risk_points(points: &[RiskCoveragePoint]) -> Vec<CurvePoint> {
    points
        .iter()
        .map(|p| CurvePoint {
            x: p.coverage,
            value: p.metric_value,
            policy: p.policy.clone(),
            seed_count: p.seed_count,
        })
        .collect()
}

/// Evaluates stored artifacts only: open-set TAR at every configured FAR,
/// Recall@1 of the mated probes, and (when the gallery carries variances)
/// risk-coverage curves under the variance and random rejection policies.
/// Writes `<name>.report.json` and `<name>.report.csv` into `report_dir`.
pub fn eval_files(
    ws: &Workspace,
    paths: &EvalPaths,
    report_dir: &Path,
    name: &str,
) -> Result<EvalMetrics> {
    let cfg = &ws.cfg;
    for (path, what) in [
        (&paths.fused, "fused gallery"),
        (&paths.mated, "mated probe file"),
        (&paths.nonmated, "nonmated probe file"),
    ] {
        if !path.exists() {
            return Err(missing(path, &format!("{what} is required")));
        }
    }
    let gallery = read_fused_gallery(&paths.fused)?;
    let mated_set = read_embedding_set(&paths.mated)?;
    let nonmated_set = read_embedding_set(&paths.nonmated)?;
    let transform = match &paths.transform {
        Some(p) => {
            if !p.exists() {
                return Err(missing(p, "transform file is required"));
            }
            Some(read_trained_transform(p)?)
        }
        None => None,
    };
    let map_query = |v: &EmbeddingVector| -> Result<EmbeddingVector> {
        match &transform {
            Some(t) => t.transform_query(v),
            None => Ok(v.clone()),
        }
    };

    let probes = ProbeSet {
        mated: mated_set
            .items()
            .iter()
            .map(|it| Ok((map_query(&it.vector)?, it.class_label)))
            .collect::<Result<_>>()?,
        nonmated: nonmated_set
            .items()
            .iter()
            .map(|it| map_query(&it.vector))
            .collect::<Result<_>>()?,
    };
    let index = GalleryIndex::from_fused(&gallery.items)?;

    let mut tar_by_far = Vec::with_capacity(cfg.eval.far_targets.len());
    for &far in &cfg.eval.far_targets {
        let op = open_set_search_eval(&index, &probes, far)?;
        tar_by_far.push((far, op.tar, op.achieved_far));
    }
    let queries: Vec<LabeledQuery> = probes
        .mated
        .iter()
        .map(|(vector, label)| LabeledQuery {
            item_id: None,
            class_label: *label,
            vector: vector.clone(),
        })
        .collect();
    let recall = recall_at_1(&index, &queries)?;

    let has_variance = gallery.items.iter().all(|it| it.variance.is_some());
    let (risk_tar, risk_recall) = if has_variance {
        let random = RiskPolicy::Random {
            seeds: rejection_seeds(cfg.master_seed, cfg.eval.random_rejection_seeds),
        };
        let far = cfg.eval.primary_far;
        let coverages = &cfg.eval.coverages;
        let mut tar_points =
            risk_coverage_open_set(&gallery.items, &probes, far, coverages, &RiskPolicy::Variance)?;
        tar_points.extend(risk_coverage_open_set(
            &gallery.items,
            &probes,
            far,
            coverages,
            &random,
        )?);
        let mut recall_points =
            risk_coverage_recall(&gallery.items, &queries, coverages, &RiskPolicy::Variance)?;
        recall_points.extend(risk_coverage_recall(
            &gallery.items,
            &queries,
            coverages,
            &random,
        )?);
        (tar_points, recall_points)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut curves = vec![
        Curve {
            name: "open_set_tar".to_string(),
            x_kind: "far".to_string(),
            points: tar_by_far
                .iter()
                .map(|&(far, tar, _)| CurvePoint::plain(far, tar))
                .collect(),
        },
        Curve {
            name: "open_set_achieved_far".to_string(),
            x_kind: "far".to_string(),
            points: tar_by_far
                .iter()
                .map(|&(far, _, achieved)| CurvePoint::plain(far, achieved))
                .collect(),
        },
        Curve {
            name: "recall_at_1".to_string(),
            x_kind: "none".to_string(),
            points: vec![CurvePoint::plain(1.0, recall)],
        },
    ];
    if !risk_tar.is_empty() {
        curves.push(Curve {
            name: "risk_coverage_tar".to_string(),
            x_kind: "coverage".to_string(),
            points: risk_points(&risk_tar),
        });
        curves.push(Curve {
            name: "risk_coverage_recall".to_string(),
            x_kind: "coverage".to_string(),
            points: risk_points(&risk_recall),
        });
    }
    let report = Report {
        config: json!({
            "name": name,
            "config_hash": ws.hash(),
            "fused": paths.fused.file_name().and_then(|s| s.to_str()),
            "query_model": gallery.query_model_id,
            "contributing_models": gallery.items.first().map(|it| it.contributing_models.clone()),
            "far_targets": cfg.eval.far_targets,
            "primary_far": cfg.eval.primary_far,
            "coverages": cfg.eval.coverages,
            "random_rejection_seeds": cfg.eval.random_rejection_seeds,
        }),
        curves,
    };
    fs::create_dir_all(report_dir)?;
    export_report(
        &report,
        &report_dir.join(format!("{name}.report.json")),
        &report_dir.join(format!("{name}.report.csv")),
    )?;
    Ok(EvalMetrics {
        tar_by_far,
        recall_at_1: recall,
        risk_tar,
        risk_recall,
    })
}

/// Default artifact locations for the stand-alone eval verb.
pub fn default_eval_paths(ws: &Workspace) -> EvalPaths {
    let cfg = &ws.cfg;
    let query = &cfg.query_model().name;
    EvalPaths {
        fused: ws.fused_path(cfg.variant),
        mated: ws.embedding_path(query, Split::ProbeMated),
        nonmated: ws.embedding_path(query, Split::ProbeNonmated),
        transform: match cfg.variant {
            TrainVariant::Unified => Some(ws.transform_path(cfg.variant)),
            _ => None,
        },
    }
}

/// Train, store, and reload in one step, canonicalizing parameters to the
/// stored f32 precision.
pub fn train_to_file(spec: &TrainSpec, path: &Path) -> Result<TrainedTransform> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let trained = train(spec)?;
    write_trained_transform(path, &trained)?;
    read_trained_transform(path)
}

/// Writes a fused gallery (with sidecar) and the probe files an arm needs
/// for self-contained re-evaluation.
pub fn write_arm_inputs(
    dir: &Path,
    query_model_id: &str,
    items: &[FusedGalleryItem],
    mated: &EmbeddingSet,
    nonmated: &EmbeddingSet,
) -> Result<EvalPaths> {
    fs::create_dir_all(dir)?;
    let fused = dir.join("fused.cmce");
    write_fused_gallery(&fused, query_model_id, items)?;
    let mated_path = dir.join("probe_mated.cmce");
    let nonmated_path = dir.join("probe_nonmated.cmce");
    write_embedding_set(&mated_path, mated)?;
    write_embedding_set(&nonmated_path, nonmated)?;
    Ok(EvalPaths {
        fused,
        mated: mated_path,
        nonmated: nonmated_path,
        transform: None,
    })
}

/// Reads back the per-item variances of a stored fused gallery, in item id
/// order.
pub fn stored_variances(fused_path: &Path) -> Result<Vec<(u32, f64)>> {
    let gallery = read_fused_gallery(fused_path)?;
    gallery
        .items
        .iter()
        .map(|it| {
            it.variance
                .map(|u| (it.item_id, u))
                .ok_or_else(|| Error::format(format!("item {} has no variance", it.item_id)))
        })
        .collect()
}

/// True when both the fused gallery file and its sidecar exist.
pub fn fused_outputs_exist(path: &Path) -> bool {
    path.exists() && fused_sidecar_path(path).exists()
}
