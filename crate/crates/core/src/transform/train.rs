//! Mini-batch training of transformation networks.
//!
//! `m2m` runs one independent training per gallery model (its own head,
//! query side fixed to identity). `unified` trains a gallery net and a
//! query net jointly into a shared space. The joint variants train all
//! nets through the fused embedding with a single shared head.

use crate::embedding::{EmbeddingSet, EmbeddingVector};
use crate::error::{Error, Result};
use crate::seedmix;

use super::loss::loss_and_grad;
use super::{
    init_transform, ClassifierHead, FusionMode, Optimizer, PairBatch, TrainConfig, TrainVariant,
    TransformNet,
};

#[derive(Debug, Clone)]
pub struct TrainSpec<'a> {
    pub variant: TrainVariant,
    pub gallery_sets: Vec<&'a EmbeddingSet>,
    pub query_set: &'a EmbeddingSet,
    pub cfg: TrainConfig,
}

/// Trained parameters plus provenance. `nets[i]` maps gallery model `i`
/// (for `concat` there is a single net over the concatenated input).
/// `heads` holds one classifier head per independent run: N for `m2m`,
/// exactly one otherwise.
#[derive(Debug, Clone)]
pub struct TrainedTransform {
    pub variant: TrainVariant,
    pub gallery_model_ids: Vec<String>,
    pub query_model_id: String,
    pub nets: Vec<TransformNet>,
    pub query_net: Option<TransformNet>,
    pub heads: Vec<ClassifierHead>,
    /// Per-epoch mean loss; for `m2m` the element-wise mean across runs.
    pub loss_history: Vec<f64>,
    pub cfg: TrainConfig,
}

impl TrainedTransform {
    /// Transform one gallery item given its embedding under every gallery
    /// model (ordered as `gallery_model_ids`). Returns the fused embedding
    /// and the per-net member outputs that produced it.
    pub fn transform_gallery_item(&self, per_model: &[&[f64]]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if self.variant == TrainVariant::Concat {
            let input: Vec<f64> = per_model.iter().flat_map(|x| x.iter().copied()).collect();
            let y = self.nets[0].forward_raw(&input)?;
            return Ok((y.clone(), vec![y]));
        }
        if per_model.len() != self.nets.len() {
            return Err(Error::InsufficientModels(per_model.len()));
        }
        let members: Vec<Vec<f64>> = self
            .nets
            .iter()
            .zip(per_model)
            .map(|(net, x)| net.forward_raw(x))
            .collect::<Result<_>>()?;
        let m = members[0].len();
        let mut fused = vec![0.0; m];
        match self.variant {
            TrainVariant::E2eWeighted => {
                let scores: Vec<f64> = self
                    .nets
                    .iter()
                    .zip(&members)
                    .map(|(net, y)| net.weight_scalar(y))
                    .collect::<Result<_>>()?;
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = weights.iter().sum();
                for w in &mut weights {
                    *w /= sum;
                }
                for (y, &w) in members.iter().zip(&weights) {
                    for (f, &v) in fused.iter_mut().zip(y) {
                        *f += w * v;
                    }
                }
            }
            _ => {
                let inv = 1.0 / members.len() as f64;
                for y in &members {
                    for (f, &v) in fused.iter_mut().zip(y) {
                        *f += inv * v;
                    }
                }
            }
        }
        Ok((fused, members))
    }

    /// Map a query embedding into the search space: identity for every
    /// variant except `unified`, which transforms the query side too.
    pub fn transform_query(&self, e: &EmbeddingVector) -> Result<EmbeddingVector> {
        match &self.query_net {
            Some(qn) => super::forward(qn, e),
            None => Ok(e.clone()),
        }
    }
}

struct RunResult {
    nets: Vec<TransformNet>,
    query_net: Option<TransformNet>,
    head: ClassifierHead,
    history: Vec<f64>,
}

pub fn train(spec: &TrainSpec) -> Result<TrainedTransform> {
    spec.cfg.validate()?;
    if spec.gallery_sets.is_empty() {
        return Err(Error::InsufficientModels(0));
    }
    if spec.variant == TrainVariant::Unified && spec.gallery_sets.len() != 1 {
        return Err(Error::invalid_config(
            "the unified variant trains one gallery model against one query model",
        ));
    }
    let gallery_model_ids: Vec<String> = spec
        .gallery_sets
        .iter()
        .map(|s| s.model_id().to_string())
        .collect();

    match spec.variant {
        TrainVariant::M2m => {
            let mut nets = Vec::new();
            let mut heads = Vec::new();
            let mut histories: Vec<Vec<f64>> = Vec::new();
            for (i, set) in spec.gallery_sets.iter().enumerate() {
                let run_seed =
                    seedmix::mix_u64(seedmix::mix_str(spec.cfg.seed, "m2m-run"), i as u64);
                let run = train_single(
                    &[set],
                    spec.query_set,
                    &spec.cfg,
                    FusionMode::Independent,
                    false,
                    run_seed,
                )?;
                nets.extend(run.nets);
                heads.push(run.head);
                histories.push(run.history);
            }
            let epochs = histories[0].len();
            let loss_history = (0..epochs)
                .map(|e| histories.iter().map(|h| h[e]).sum::<f64>() / histories.len() as f64)
                .collect();
            Ok(TrainedTransform {
                variant: spec.variant,
                gallery_model_ids,
                query_model_id: spec.query_set.model_id().to_string(),
                nets,
                query_net: None,
                heads,
                loss_history,
                cfg: spec.cfg.clone(),
            })
        }
        TrainVariant::Unified => {
            let run = train_single(
                &spec.gallery_sets,
                spec.query_set,
                &spec.cfg,
                FusionMode::Independent,
                true,
                seedmix::mix_str(spec.cfg.seed, "unified-run"),
            )?;
            Ok(TrainedTransform {
                variant: spec.variant,
                gallery_model_ids,
                query_model_id: spec.query_set.model_id().to_string(),
                nets: run.nets,
                query_net: run.query_net,
                heads: vec![run.head],
                loss_history: run.history,
                cfg: spec.cfg.clone(),
            })
        }
        TrainVariant::E2eMean | TrainVariant::E2eWeighted | TrainVariant::Concat => {
            let run = train_single(
                &spec.gallery_sets,
                spec.query_set,
                &spec.cfg,
                spec.variant.fusion(),
                false,
                seedmix::mix_str(spec.cfg.seed, "joint-run"),
            )?;
            Ok(TrainedTransform {
                variant: spec.variant,
                gallery_model_ids,
                query_model_id: spec.query_set.model_id().to_string(),
                nets: run.nets,
                query_net: None,
                heads: vec![run.head],
                loss_history: run.history,
                cfg: spec.cfg.clone(),
            })
        }
    }
}

fn train_single(
    gallery_sets: &[&EmbeddingSet],
    query_set: &EmbeddingSet,
    cfg: &TrainConfig,
    fusion: FusionMode,
    with_query_net: bool,
    run_seed: u64,
) -> Result<RunResult> {
    let data = PairBatch::from_sets(gallery_sets, query_set)?;
    let num_classes = data
        .labels
        .iter()
        .max()
        .map(|&m| m as usize + 1)
        .unwrap_or(0);
    if num_classes < 2 {
        return Err(Error::invalid_config(
            "training needs at least two classes",
        ));
    }
    let m = query_set.dim();

    let mut nets = match fusion {
        FusionMode::Concat => {
            let concat_dim: usize = gallery_sets.iter().map(|s| s.dim()).sum();
            vec![init_transform(
                concat_dim,
                m,
                seedmix::mix_u64(seedmix::mix_str(run_seed, "net"), 0),
                false,
            )?]
        }
        _ => gallery_sets
            .iter()
            .enumerate()
            .map(|(i, set)| {
                init_transform(
                    set.dim(),
                    m,
                    seedmix::mix_u64(seedmix::mix_str(run_seed, "net"), i as u64),
                    fusion == FusionMode::E2eWeighted,
                )
            })
            .collect::<Result<_>>()?,
    };
    let mut query_net = if with_query_net {
        Some(init_transform(
            m,
            m,
            seedmix::mix_str(run_seed, "query-net"),
            false,
        )?)
    } else {
        None
    };
    let mut head = ClassifierHead::init(
        num_classes,
        m,
        cfg.head_scale,
        seedmix::mix_str(run_seed, "head"),
    )?;

    let param_count: usize = nets.iter().map(|n| n.param_count()).sum::<usize>()
        + query_net.as_ref().map_or(0, |n| n.param_count())
        + head.weights.data.len();
    let mut opt = OptimizerState::new(cfg, param_count);

    let n_items = data.len();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_items).collect();
        let mut rng = seedmix::rng(run_seed, &["shuffle", &epoch.to_string()]);
        shuffle(&mut order, &mut rng);

        let mut epoch_loss = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.select(chunk);
            let (loss, grads) =
                loss_and_grad(&nets, query_net.as_ref(), &head, &batch, cfg, fusion)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "loss {} at epoch {epoch}, batch {batch_idx}; try a lower learning rate",
                    loss.total
                )));
            }
            epoch_loss += loss.total * chunk.len() as f64;
            let flat = grads.flatten();
            opt.step(&flat, &mut nets, query_net.as_mut(), &mut head);
        }
        history.push(epoch_loss / n_items as f64);
    }

    Ok(RunResult {
        nets,
        query_net,
        head,
        history,
    })
}

/// Fisher-Yates with draws from the given RNG.
fn shuffle<R: rand::Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

struct OptimizerState {
    kind: Optimizer,
    lr: f64,
    momentum: f64,
    step_count: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(cfg: &TrainConfig, param_count: usize) -> Self {
        let second = match cfg.optimizer {
            Optimizer::AdaptiveMoments => vec![0.0; param_count],
            Optimizer::SgdMomentum => Vec::new(),
        };
        Self {
            kind: cfg.optimizer,
            lr: cfg.learning_rate,
            momentum: cfg.momentum,
            step_count: 0,
            first: vec![0.0; param_count],
            second,
        }
    }

    /// One update over all parameters, walking them in the same canonical
    /// order `GradBundle::flatten` uses.
    fn step(
        &mut self,
        flat_grads: &[f64],
        nets: &mut [TransformNet],
        query_net: Option<&mut TransformNet>,
        head: &mut ClassifierHead,
    ) {
        assert_eq!(flat_grads.len(), self.first.len(), "gradient layout drift");
        self.step_count += 1;
        let mut idx = 0;
        let mut update = |p: &mut f64| {
            let g = flat_grads[idx];
            match self.kind {
                Optimizer::AdaptiveMoments => {
                    let m = &mut self.first[idx];
                    let v = &mut self.second[idx];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / (1.0 - ADAM_BETA1.powi(self.step_count as i32));
                    let v_hat = *v / (1.0 - ADAM_BETA2.powi(self.step_count as i32));
                    *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
                Optimizer::SgdMomentum => {
                    let vel = &mut self.first[idx];
                    *vel = self.momentum * *vel + g;
                    *p -= self.lr * *vel;
                }
            }
            idx += 1;
        };
        for net in nets.iter_mut() {
            net.for_each_param_mut(&mut update);
        }
        if let Some(qn) = query_net {
            qn.for_each_param_mut(&mut update);
        }
        for v in &mut head.weights.data {
            update(v);
        }
    }
}
