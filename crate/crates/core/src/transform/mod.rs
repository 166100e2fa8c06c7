//! Transformation networks and their training.
//!
//! A [`TransformNet`] maps one embedding space into another: an input
//! projection followed by four residual bottleneck blocks
//! (`x + expand(leaky_relu(reduce(x)))`). Networks start as the identity
//! (partial identity projection, zero expand weights), so the self-mapping
//! case is stable from step zero and training only has to learn the warp
//! between spaces.
//!
//! Training couples a transformed-gallery embedding `t` and a query-side
//! embedding `q` through three losses: a cosine similarity loss pulling
//! `t` toward `q`, a symmetric KL term aligning their class posteriors
//! under a shared [`ClassifierHead`], and a dual cross-entropy classifying
//! both sides. Gradients are fully hand-written and checked against
//! central finite differences (see [`grad_check`]).

mod gradcheck;
mod loss;
mod serial;
mod train;

pub use gradcheck::grad_check;
pub use loss::{loss_and_grad, GradBundle, LossBreakdown};
pub use serial::{read_trained_transform, write_trained_transform};
pub use train::{train, TrainSpec, TrainedTransform};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Bottleneck reduction ratio of the residual blocks.
pub const REDUCTION_RATIO: usize = 4;
/// Number of residual bottleneck blocks in every network.
pub const NUM_BLOCKS: usize = 4;
/// Negative-side slope of the leaky rectifier inside blocks.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Affine map `x -> W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Affine {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.w.matvec(x);
        for (v, b) in y.iter_mut().zip(&self.b) {
            *v += b;
        }
        y
    }

    fn for_each_param(&self, f: &mut impl FnMut(f64)) {
        for &v in &self.w.data {
            f(v);
        }
        for &v in &self.b {
            f(v);
        }
    }

    fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        for v in &mut self.w.data {
            f(v);
        }
        for v in &mut self.b {
            f(v);
        }
    }
}

/// One residual bottleneck block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub reduce: Affine,
    pub expand: Affine,
}

pub(crate) fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub(crate) fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// Residual bottleneck transformation stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformNet {
    pub in_dim: usize,
    pub out_dim: usize,
    pub projection: Affine,
    pub blocks: Vec<Block>,
    /// Scalar head producing this net's fusion weight; present only for the
    /// weighted joint training variant.
    pub weight_head: Option<Affine>,
}

/// Build a network in its identity-like initial state. The projection is
/// the partial identity (exact identity when `n == m`), block reduce
/// weights are seeded uniform in `±1/sqrt(m)`, and block expand weights
/// are zero so every block starts as a no-op.
pub fn init_transform(n: usize, m: usize, seed: u64, with_weight_head: bool) -> Result<TransformNet> {
    if n < 2 || m < 2 {
        return Err(Error::invalid_config(format!(
            "net dims must be >= 2, got {n} -> {m}"
        )));
    }
    if !m.is_multiple_of(REDUCTION_RATIO) {
        return Err(Error::invalid_config(format!(
            "out_dim {m} must be divisible by the reduction ratio {REDUCTION_RATIO}"
        )));
    }
    let mut projection = Affine::zeros(m, n);
    for i in 0..m.min(n) {
        projection.w.set(i, i, 1.0);
    }
    let mut rng = crate::seedmix::rng(seed, &["transform-init"]);
    let bottleneck = m / REDUCTION_RATIO;
    let scale = 1.0 / (m as f64).sqrt();
    let blocks = (0..NUM_BLOCKS)
        .map(|_| {
            let mut reduce = Affine::zeros(bottleneck, m);
            for v in &mut reduce.w.data {
                *v = rng.gen_range(-scale..scale);
            }
            Block {
                reduce,
                expand: Affine::zeros(m, bottleneck),
            }
        })
        .collect();
    Ok(TransformNet {
        in_dim: n,
        out_dim: m,
        projection,
        blocks,
        weight_head: if with_weight_head {
            Some(Affine::zeros(1, m))
        } else {
            None
        },
    })
}

/// Per-item forward cache used by backprop.
#[derive(Debug, Clone)]
pub(crate) struct ForwardTrace {
    /// `h[0]` is the projection output, `h[k]` the output of block `k`.
    pub h: Vec<Vec<f64>>,
    /// Bottleneck pre-activations per block.
    pub pre: Vec<Vec<f64>>,
    /// Bottleneck activations per block.
    pub act: Vec<Vec<f64>>,
}

impl TransformNet {
    pub(crate) fn forward_trace(&self, x: &[f64]) -> ForwardTrace {
        assert_eq!(x.len(), self.in_dim, "forward input dim mismatch");
        let mut h = Vec::with_capacity(NUM_BLOCKS + 1);
        let mut pre = Vec::with_capacity(NUM_BLOCKS);
        let mut act = Vec::with_capacity(NUM_BLOCKS);
        h.push(self.projection.apply(x));
        for block in &self.blocks {
            let cur = h.last().unwrap();
            let p = block.reduce.apply(cur);
            let a: Vec<f64> = p.iter().map(|&v| leaky_relu(v)).collect();
            let mut next = block.expand.apply(&a);
            for (n, c) in next.iter_mut().zip(cur) {
                *n += c;
            }
            pre.push(p);
            act.push(a);
            h.push(next);
        }
        ForwardTrace { h, pre, act }
    }

    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim,
                got: x.len(),
            });
        }
        let mut trace = self.forward_trace(x);
        Ok(trace.h.pop().expect("trace holds the projection output"))
    }

    /// Fusion-weight scalar for the weighted joint variant: the weight head
    /// applied to this net's own output.
    pub(crate) fn weight_scalar(&self, y: &[f64]) -> Result<f64> {
        let head = self.weight_head.as_ref().ok_or_else(|| {
            Error::invalid_config("weighted fusion requires nets built with weight heads")
        })?;
        Ok(head.apply(y)[0])
    }

    /// Backpropagate `upstream = dL/dy` through the net for the cached
    /// forward pass of input `x`, accumulating parameter gradients into
    /// `grad` (which must have this net's shape). Returns `dL/dx`.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        trace: &ForwardTrace,
        upstream: &[f64],
        grad: &mut TransformNet,
    ) -> Vec<f64> {
        let mut u = upstream.to_vec();
        for k in (0..NUM_BLOCKS).rev() {
            let block = &self.blocks[k];
            let gblock = &mut grad.blocks[k];
            let a = &trace.act[k];
            let hin = &trace.h[k];
            // expand: y += W_e a + b_e
            for (r, &ur) in u.iter().enumerate() {
                let row = gblock.expand.w.row_mut(r);
                for (gw, &av) in row.iter_mut().zip(a) {
                    *gw += ur * av;
                }
                gblock.expand.b[r] += ur;
            }
            let mut d_pre = block.expand.w.matvec_t(&u);
            for (dp, &p) in d_pre.iter_mut().zip(&trace.pre[k]) {
                *dp *= leaky_relu_grad(p);
            }
            for (r, &dr) in d_pre.iter().enumerate() {
                let row = gblock.reduce.w.row_mut(r);
                for (gw, &hv) in row.iter_mut().zip(hin) {
                    *gw += dr * hv;
                }
                gblock.reduce.b[r] += dr;
            }
            let through = block.reduce.w.matvec_t(&d_pre);
            for (uv, t) in u.iter_mut().zip(through) {
                *uv += t;
            }
        }
        for (r, &ur) in u.iter().enumerate() {
            let row = grad.projection.w.row_mut(r);
            for (gw, &xv) in row.iter_mut().zip(x) {
                *gw += ur * xv;
            }
            grad.projection.b[r] += ur;
        }
        self.projection.w.matvec_t(&u)
    }

    /// Same-shape net with all parameters zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_param_mut(&mut |v| *v = 0.0);
        z
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_| n += 1);
        n
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(f64)) {
        self.projection.for_each_param(f);
        for b in &self.blocks {
            b.reduce.for_each_param(f);
            b.expand.for_each_param(f);
        }
        if let Some(h) = &self.weight_head {
            h.for_each_param(f);
        }
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&mut f64)) {
        self.projection.for_each_param_mut(f);
        for b in &mut self.blocks {
            b.reduce.for_each_param_mut(f);
            b.expand.for_each_param_mut(f);
        }
        if let Some(h) = &mut self.weight_head {
            h.for_each_param_mut(f);
        }
    }

    /// Overwrite all parameters with N(0, std^2) draws (test utility for
    /// exercising the net away from its identity init).
    pub fn randomize<R: Rng>(&mut self, rng: &mut R, std: f64) {
        use rand_distr::{Distribution, StandardNormal};
        self.for_each_param_mut(&mut |v| {
            let z: f64 = StandardNormal.sample(rng);
            *v = z * std;
        });
    }
}

/// Apply the net to one embedding. Output is not normalized; consumers
/// normalize when scoring, matching the cosine convention.
pub fn forward(net: &TransformNet, e: &EmbeddingVector) -> Result<EmbeddingVector> {
    let out = net.forward_raw(e.values())?;
    EmbeddingVector::new(out)
}

/// Shared classification head: rows are class vectors, logits are scaled
/// cosines between a row and an embedding (both normalized inside).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weights: Mat,
    pub scale: f64,
}

impl ClassifierHead {
    pub fn init(num_classes: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 || dim < 2 {
            return Err(Error::invalid_config(format!(
                "classifier head needs >= 2 classes and dim >= 2, got {num_classes} x {dim}"
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid_config("head scale must be positive"));
        }
        let mut rng = crate::seedmix::rng(seed, &["classifier-head"]);
        let mut weights = Mat::zeros(num_classes, dim);
        weights.fill_gaussian(&mut rng, 1.0 / (dim as f64).sqrt());
        Ok(Self { weights, scale })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows
    }

    pub fn dim(&self) -> usize {
        self.weights.cols
    }
}

/// How per-model transformed embeddings combine during joint training (and
/// at inference for the joint variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Exactly one net; its output is used directly.
    Independent,
    /// Mean of all nets' outputs.
    E2eMean,
    /// Softmax-weighted mean, weights from each net's weight head.
    E2eWeighted,
    /// One net over the concatenation of all model inputs.
    Concat,
}

/// Training schemes. `M2m` trains one independent net per gallery model
/// with the query side fixed to identity; `Unified` additionally trains a
/// query-side net; the `E2e*`/`Concat` variants train all nets jointly
/// through the fused embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    M2m,
    Unified,
    E2eMean,
    E2eWeighted,
    Concat,
}

impl TrainVariant {
    pub fn fusion(self) -> FusionMode {
        match self {
            TrainVariant::M2m | TrainVariant::Unified => FusionMode::Independent,
            TrainVariant::E2eMean => FusionMode::E2eMean,
            TrainVariant::E2eWeighted => FusionMode::E2eWeighted,
            TrainVariant::Concat => FusionMode::Concat,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainVariant::M2m => "m2m",
            TrainVariant::Unified => "unified",
            TrainVariant::E2eMean => "e2e_mean",
            TrainVariant::E2eWeighted => "e2e_weighted",
            TrainVariant::Concat => "concat",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    AdaptiveMoments,
}

/// Direction of the posterior-alignment KL term. `p` is the transformed
/// side's posterior, `q` the query side's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// (KL(p||q) + KL(q||p)) / 2
    Symmetric,
    /// KL(p||q)
    Forward,
    /// KL(q||p)
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_lambda")]
    pub lambda_sim: f64,
    #[serde(default = "default_lambda")]
    pub lambda_kl: f64,
    #[serde(default = "default_lambda")]
    pub lambda_cls: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_head_scale")]
    pub head_scale: f64,
    #[serde(default = "default_kl_mode")]
    pub kl_mode: KlMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    300
}
fn default_batch_size() -> usize {
    256
}
fn default_learning_rate() -> f64 {
    1e-3
}
fn default_lambda() -> f64 {
    1.0
}
fn default_optimizer() -> Optimizer {
    Optimizer::AdaptiveMoments
}
fn default_momentum() -> f64 {
    0.9
}
fn default_head_scale() -> f64 {
    16.0
}
fn default_kl_mode() -> KlMode {
    KlMode::Symmetric
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            lambda_sim: default_lambda(),
            lambda_kl: default_lambda(),
            lambda_cls: default_lambda(),
            optimizer: default_optimizer(),
            momentum: default_momentum(),
            head_scale: default_head_scale(),
            kl_mode: default_kl_mode(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_sim, self.lambda_kl, self.lambda_cls];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::invalid_config("loss weights must be >= 0 and finite"));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::invalid_config("at least one loss weight must be > 0"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid_config("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid_config("learning_rate must be positive"));
        }
        if !(self.head_scale > 0.0 && self.head_scale.is_finite()) {
            return Err(Error::invalid_config("head_scale must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid_config("momentum must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Aligned training batch: one gallery embedding per model plus the query
/// model's embedding of the same sample, for each item.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `gallery[i][b]` is model `i`'s embedding of item `b`.
    pub gallery: Vec<Vec<Vec<f64>>>,
    /// `query[b]` is the query model's embedding of item `b`.
    pub query: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
}

impl PairBatch {
    /// Align gallery sets and the query set by item id. Every set must
    /// cover exactly the same item ids; rows come out sorted by item id.
    pub fn from_sets(gallery_sets: &[&crate::embedding::EmbeddingSet], query_set: &crate::embedding::EmbeddingSet) -> Result<Self> {
        if gallery_sets.is_empty() {
            return Err(Error::InsufficientModels(0));
        }
        let mut query_rows: Vec<(u32, u32, &[f64])> = query_set
            .items()
            .iter()
            .map(|it| (it.item_id, it.class_label, it.vector.values()))
            .collect();
        query_rows.sort_by_key(|r| r.0);
        let mut gallery = Vec::with_capacity(gallery_sets.len());
        for set in gallery_sets {
            if set.len() != query_set.len() {
                return Err(Error::invalid_config(format!(
                    "set {} has {} items, query set has {}",
                    set.model_id(),
                    set.len(),
                    query_set.len()
                )));
            }
            let mut rows: Vec<(u32, &[f64])> = set
                .items()
                .iter()
                .map(|it| (it.item_id, it.vector.values()))
                .collect();
            rows.sort_by_key(|r| r.0);
            for (g, q) in rows.iter().zip(&query_rows) {
                if g.0 != q.0 {
                    return Err(Error::invalid_config(format!(
                        "item ids of set {} do not match the query set (found {} vs {})",
                        set.model_id(),
                        g.0,
                        q.0
                    )));
                }
            }
            gallery.push(rows.into_iter().map(|(_, v)| v.to_vec()).collect());
        }
        Ok(Self {
            gallery,
            query: query_rows.iter().map(|(_, _, v)| v.to_vec()).collect(),
            labels: query_rows.iter().map(|(_, l, _)| *l).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// View of the rows at `indices` (used for mini-batching).
    pub fn select(&self, indices: &[usize]) -> PairBatch {
        PairBatch {
            gallery: self
                .gallery
                .iter()
                .map(|per_model| indices.iter().map(|&i| per_model[i].clone()).collect())
                .collect(),
            query: indices.iter().map(|&i| self.query[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}
