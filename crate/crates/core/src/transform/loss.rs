//! The three-term compatibility loss and its analytic gradients.
//!
//! Per item, with `t` the fused transformed gallery embedding and `q` the
//! query-side embedding (both normalized to `t̂`, `q̂` before use):
//!
//! * similarity:   `L_sim = ||t̂ - q̂||² / 2`, which equals `1 - cos(t, q)`
//!   and is exactly zero for bitwise-identical inputs,
//! * posteriors:   `L_kl` between `softmax(head(t̂))` and `softmax(head(q̂))`
//!   in the configured direction,
//! * dual class:   `L_cls = CE(head(t̂), y) + CE(head(q̂), y)`.
//!
//! The batch loss is the item mean of
//! `λ_sim L_sim + λ_kl L_kl + λ_cls L_cls`. Gradients are exact analytic
//! derivatives with respect to every trainable parameter: all nets, the
//! query-side net when present, and the classifier head rows (gradient
//! flows through the row normalization).
//!
//! Per-item contributions are accumulated in fixed chunks reduced in index
//! order, so results are bit-identical for any rayon thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::{dot_slices, Mat};

use super::{ClassifierHead, FusionMode, KlMode, PairBatch, TrainConfig, TransformNet};

/// Items per deterministic reduction chunk.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub sim: f64,
    pub kl: f64,
    pub cls: f64,
}

/// Gradients in the same shapes as the trainable parameters.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub nets: Vec<TransformNet>,
    pub query_net: Option<TransformNet>,
    pub head: Mat,
}

impl GradBundle {
    fn zeros(nets: &[TransformNet], query_net: Option<&TransformNet>, head: &ClassifierHead) -> Self {
        Self {
            nets: nets.iter().map(|n| n.zeros_like()).collect(),
            query_net: query_net.map(|n| n.zeros_like()),
            head: Mat::zeros(head.weights.rows, head.weights.cols),
        }
    }

    fn add(&mut self, other: &GradBundle) {
        for (a, b) in self.nets.iter_mut().zip(&other.nets) {
            let mut vals = Vec::with_capacity(b.param_count());
            b.for_each_param(&mut |v| vals.push(v));
            let mut i = 0;
            a.for_each_param_mut(&mut |p| {
                *p += vals[i];
                i += 1;
            });
        }
        if let (Some(a), Some(b)) = (self.query_net.as_mut(), other.query_net.as_ref()) {
            let mut vals = Vec::with_capacity(b.param_count());
            b.for_each_param(&mut |v| vals.push(v));
            let mut i = 0;
            a.for_each_param_mut(&mut |p| {
                *p += vals[i];
                i += 1;
            });
        }
        for (a, b) in self.head.data.iter_mut().zip(&other.head.data) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        for n in &mut self.nets {
            n.for_each_param_mut(&mut |p| *p *= s);
        }
        if let Some(n) = &mut self.query_net {
            n.for_each_param_mut(&mut |p| *p *= s);
        }
        for v in &mut self.head.data {
            *v *= s;
        }
    }

    /// All gradient values in the canonical parameter order: nets by model
    /// index, then the query net, then head rows.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for n in &self.nets {
            n.for_each_param(&mut |v| out.push(v));
        }
        if let Some(n) = &self.query_net {
            n.for_each_param(&mut |v| out.push(v));
        }
        out.extend_from_slice(&self.head.data);
        out
    }
}

fn check_shapes(
    nets: &[TransformNet],
    query_net: Option<&TransformNet>,
    head: &ClassifierHead,
    batch: &PairBatch,
    fusion: FusionMode,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid_config("empty batch"));
    }
    if nets.is_empty() {
        return Err(Error::InsufficientModels(0));
    }
    match fusion {
        FusionMode::Independent if nets.len() != 1 => {
            return Err(Error::invalid_config(format!(
                "independent fusion uses exactly one net, got {}",
                nets.len()
            )));
        }
        FusionMode::Concat if nets.len() != 1 => {
            return Err(Error::invalid_config(format!(
                "concat fusion uses exactly one net, got {}",
                nets.len()
            )));
        }
        FusionMode::E2eWeighted if nets.iter().any(|n| n.weight_head.is_none()) => {
            return Err(Error::invalid_config(
                "weighted fusion requires nets built with weight heads",
            ));
        }
        _ => {}
    }
    let m = nets[0].out_dim;
    if nets.iter().any(|n| n.out_dim != m) {
        return Err(Error::invalid_config("all nets must share out_dim"));
    }
    if head.dim() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: head.dim(),
        });
    }
    let concat_dim: usize = batch.gallery.iter().map(|g| g[0].len()).sum();
    match fusion {
        FusionMode::Concat => {
            if nets[0].in_dim != concat_dim {
                return Err(Error::DimensionMismatch {
                    expected: concat_dim,
                    got: nets[0].in_dim,
                });
            }
        }
        _ => {
            if nets.len() != batch.gallery.len() {
                return Err(Error::invalid_config(format!(
                    "{} nets for {} gallery models",
                    nets.len(),
                    batch.gallery.len()
                )));
            }
            for (net, per_model) in nets.iter().zip(&batch.gallery) {
                if net.in_dim != per_model[0].len() {
                    return Err(Error::DimensionMismatch {
                        expected: per_model[0].len(),
                        got: net.in_dim,
                    });
                }
            }
        }
    }
    let q_dim = batch.query[0].len();
    match query_net {
        Some(qn) => {
            if qn.in_dim != q_dim || qn.out_dim != m {
                return Err(Error::DimensionMismatch {
                    expected: q_dim,
                    got: qn.in_dim,
                });
            }
        }
        None => {
            if q_dim != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: q_dim,
                });
            }
        }
    }
    let c = head.num_classes() as u32;
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid_config(format!(
            "label {bad} outside the head's {c} classes"
        )));
    }
    Ok(())
}

/// Row-normalized view of the head plus row norms (for backprop through
/// the normalization).
struct NormalizedHead {
    rows: Mat,
    norms: Vec<f64>,
}

fn normalize_head(head: &ClassifierHead) -> NormalizedHead {
    let mut rows = head.weights.clone();
    let mut norms = Vec::with_capacity(rows.rows);
    for r in 0..rows.rows {
        let row = rows.row_mut(r);
        let norm = dot_slices(row, row).sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    NormalizedHead { rows, norms }
}

/// Log-softmax of `s * (Ŵ v̂)`; returns (log-probs, probs).
fn head_log_posterior(nhead: &NormalizedHead, scale: f64, v_hat: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut logits = nhead.rows.matvec(v_hat);
    for z in &mut logits {
        *z *= scale;
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in &logits {
        sum += (z - max).exp();
    }
    let lse = max + sum.ln();
    let logp: Vec<f64> = logits.iter().map(|z| z - lse).collect();
    let p: Vec<f64> = logp.iter().map(|lp| lp.exp()).collect();
    (logp, p)
}

/// KL value and its gradients with respect to both logit vectors.
/// `p`/`logp` belong to the transformed side, `r`/`logr` to the query side.
fn kl_value_and_logit_grads(
    mode: KlMode,
    logp: &[f64],
    p: &[f64],
    logr: &[f64],
    r: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let c = p.len();
    let kl_pr: f64 = (0..c).map(|j| p[j] * (logp[j] - logr[j])).sum();
    let kl_rp: f64 = (0..c).map(|j| r[j] * (logr[j] - logp[j])).sum();
    let mut dz_t = vec![0.0; c];
    let mut dz_q = vec![0.0; c];
    match mode {
        KlMode::Forward => {
            for j in 0..c {
                dz_t[j] = p[j] * (logp[j] - logr[j]) - p[j] * kl_pr;
                dz_q[j] = r[j] - p[j];
            }
            (kl_pr, dz_t, dz_q)
        }
        KlMode::Reverse => {
            for j in 0..c {
                dz_t[j] = p[j] - r[j];
                dz_q[j] = r[j] * (logr[j] - logp[j]) - r[j] * kl_rp;
            }
            (kl_rp, dz_t, dz_q)
        }
        KlMode::Symmetric => {
            for j in 0..c {
                dz_t[j] = 0.5 * (p[j] * (logp[j] - logr[j]) - p[j] * kl_pr + p[j] - r[j]);
                dz_q[j] = 0.5 * (r[j] * (logr[j] - logp[j]) - r[j] * kl_rp + r[j] - p[j]);
            }
            (0.5 * (kl_pr + kl_rp), dz_t, dz_q)
        }
    }
}

/// dL/dv from dL/dv̂ through v̂ = v / ||v||.
fn through_normalization(v_hat: &[f64], norm: f64, upstream: &[f64]) -> Vec<f64> {
    let along = dot_slices(upstream, v_hat);
    upstream
        .iter()
        .zip(v_hat)
        .map(|(u, h)| (u - along * h) / norm)
        .collect()
}

struct ItemWork<'a> {
    nets: &'a [TransformNet],
    query_net: Option<&'a TransformNet>,
    head: &'a ClassifierHead,
    nhead: &'a NormalizedHead,
    batch: &'a PairBatch,
    cfg: &'a TrainConfig,
    fusion: FusionMode,
}

impl ItemWork<'_> {
    /// Loss terms for item `b`; when `grad` is given, gradients are
    /// accumulated into it.
    fn item(&self, b: usize, grad: Option<&mut GradBundle>) -> (f64, f64, f64) {
        let cfg = self.cfg;

        // Forward: per-net outputs and the fused embedding t.
        let concat_input: Vec<f64>;
        let inputs: Vec<&[f64]> = match self.fusion {
            FusionMode::Concat => {
                concat_input = self
                    .batch
                    .gallery
                    .iter()
                    .flat_map(|per_model| per_model[b].iter().copied())
                    .collect();
                vec![&concat_input]
            }
            _ => self.batch.gallery.iter().map(|g| g[b].as_slice()).collect(),
        };
        let traces: Vec<_> = self
            .nets
            .iter()
            .zip(&inputs)
            .map(|(net, x)| net.forward_trace(x))
            .collect();
        let outputs: Vec<&[f64]> = traces.iter().map(|tr| tr.h.last().unwrap().as_slice()).collect();
        let m = outputs[0].len();
        let n_nets = outputs.len();

        let mut fuse_weights = vec![1.0 / n_nets as f64; n_nets];
        if self.fusion == FusionMode::E2eWeighted {
            let raw_scores: Vec<f64> = self
                .nets
                .iter()
                .zip(&outputs)
                .map(|(net, y)| net.weight_scalar(y).expect("checked in validation"))
                .collect();
            let max = raw_scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (w, &s) in fuse_weights.iter_mut().zip(&raw_scores) {
                *w = (s - max).exp();
                sum += *w;
            }
            for w in &mut fuse_weights {
                *w /= sum;
            }
        } else if matches!(self.fusion, FusionMode::Independent | FusionMode::Concat) {
            fuse_weights = vec![1.0];
        }
        let mut t = vec![0.0; m];
        for (y, &w) in outputs.iter().zip(&fuse_weights) {
            for (tv, &yv) in t.iter_mut().zip(*y) {
                *tv += w * yv;
            }
        }

        // Query side.
        let q_trace = self.query_net.map(|qn| qn.forward_trace(&self.batch.query[b]));
        let q: &[f64] = match &q_trace {
            Some(tr) => tr.h.last().unwrap(),
            None => &self.batch.query[b],
        };

        let t_norm = dot_slices(&t, &t).sqrt();
        let q_norm = dot_slices(q, q).sqrt();
        let t_hat: Vec<f64> = t.iter().map(|v| v / t_norm).collect();
        let q_hat: Vec<f64> = q.iter().map(|v| v / q_norm).collect();

        let l_sim: f64 = t_hat
            .iter()
            .zip(&q_hat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 2.0;

        let (logp, p) = head_log_posterior(self.nhead, self.head.scale, &t_hat);
        let (logr, r) = head_log_posterior(self.nhead, self.head.scale, &q_hat);
        let label = self.batch.labels[b] as usize;
        let l_cls = -(logp[label] + logr[label]);
        let (l_kl, kl_dz_t, kl_dz_q) = kl_value_and_logit_grads(cfg.kl_mode, &logp, &p, &logr, &r);

        let grad = match grad {
            Some(g) => g,
            None => return (l_sim, l_kl, l_cls),
        };

        // Backward. Upstream gradients on the two logit vectors.
        let c = p.len();
        let mut dz_t = vec![0.0; c];
        let mut dz_q = vec![0.0; c];
        for j in 0..c {
            let one_hot = if j == label { 1.0 } else { 0.0 };
            dz_t[j] = cfg.lambda_cls * (p[j] - one_hot) + cfg.lambda_kl * kl_dz_t[j];
            dz_q[j] = cfg.lambda_cls * (r[j] - one_hot) + cfg.lambda_kl * kl_dz_q[j];
        }

        // dL/dt̂ and dL/dq̂: similarity term plus the head terms.
        let mut d_that: Vec<f64> = t_hat
            .iter()
            .zip(&q_hat)
            .map(|(tv, qv)| cfg.lambda_sim * (tv - qv))
            .collect();
        let mut d_qhat: Vec<f64> = q_hat
            .iter()
            .zip(&t_hat)
            .map(|(qv, tv)| cfg.lambda_sim * (qv - tv))
            .collect();
        let head_t = self.nhead.rows.matvec_t(&dz_t);
        let head_q = self.nhead.rows.matvec_t(&dz_q);
        for i in 0..m {
            d_that[i] += self.head.scale * head_t[i];
            d_qhat[i] += self.head.scale * head_q[i];
        }

        // Head row gradients from both sides, through row normalization.
        for j in 0..c {
            let wj = self.nhead.rows.row(j);
            let coef_t = self.head.scale * dz_t[j];
            let coef_q = self.head.scale * dz_q[j];
            let t_along = dot_slices(&t_hat, wj);
            let q_along = dot_slices(&q_hat, wj);
            let grow = grad.head.row_mut(j);
            let inv = 1.0 / self.nhead.norms[j];
            for i in 0..m {
                grow[i] += inv
                    * (coef_t * (t_hat[i] - t_along * wj[i]) + coef_q * (q_hat[i] - q_along * wj[i]));
            }
        }

        let d_t = through_normalization(&t_hat, t_norm, &d_that);
        let d_q = through_normalization(&q_hat, q_norm, &d_qhat);

        // Fusion backward: per-net upstream gradients.
        match self.fusion {
            FusionMode::Independent | FusionMode::Concat => {
                self.nets[0].backward(inputs[0], &traces[0], &d_t, &mut grad.nets[0]);
            }
            FusionMode::E2eMean => {
                let scaled: Vec<f64> = d_t.iter().map(|v| v / n_nets as f64).collect();
                for i in 0..n_nets {
                    self.nets[i].backward(inputs[i], &traces[i], &scaled, &mut grad.nets[i]);
                }
            }
            FusionMode::E2eWeighted => {
                let dots: Vec<f64> = outputs.iter().map(|y| dot_slices(&d_t, y)).collect();
                let mean: f64 = fuse_weights.iter().zip(&dots).map(|(w, d)| w * d).sum();
                for i in 0..n_nets {
                    let d_score = fuse_weights[i] * (dots[i] - mean);
                    let wh = self.nets[i].weight_head.as_ref().unwrap();
                    let mut dy: Vec<f64> = d_t.iter().map(|v| fuse_weights[i] * v).collect();
                    for (dv, &hw) in dy.iter_mut().zip(wh.w.row(0)) {
                        *dv += d_score * hw;
                    }
                    self.nets[i].backward(inputs[i], &traces[i], &dy, &mut grad.nets[i]);
                    let ghead = grad.nets[i].weight_head.as_mut().unwrap();
                    for (gw, &yv) in ghead.w.row_mut(0).iter_mut().zip(outputs[i]) {
                        *gw += d_score * yv;
                    }
                    ghead.b[0] += d_score;
                }
            }
        }

        if let (Some(qn), Some(tr)) = (self.query_net, &q_trace) {
            qn.backward(
                &self.batch.query[b],
                tr,
                &d_q,
                grad.query_net.as_mut().unwrap(),
            );
        }

        (l_sim, l_kl, l_cls)
    }
}

/// Batch loss and exact analytic gradients for all trainable parameters.
/// `query_net = None` means the query side is the identity mapping.
pub fn loss_and_grad(
    nets: &[TransformNet],
    query_net: Option<&TransformNet>,
    head: &ClassifierHead,
    batch: &PairBatch,
    cfg: &TrainConfig,
    fusion: FusionMode,
) -> Result<(LossBreakdown, GradBundle)> {
    cfg.validate()?;
    check_shapes(nets, query_net, head, batch, fusion)?;
    let nhead = normalize_head(head);
    let work = ItemWork {
        nets,
        query_net,
        head,
        nhead: &nhead,
        batch,
        cfg,
        fusion,
    };

    let n = batch.len();
    let indices: Vec<usize> = (0..n).collect();
    // Chunked map-reduce: each chunk accumulates sequentially, chunks are
    // combined in index order, so any thread count gives identical bits.
    let partials: Vec<(f64, f64, f64, GradBundle)> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = GradBundle::zeros(nets, query_net, head);
            let mut sums = (0.0, 0.0, 0.0);
            for &b in chunk {
                let (s, k, c) = work.item(b, Some(&mut grad));
                sums.0 += s;
                sums.1 += k;
                sums.2 += c;
            }
            (sums.0, sums.1, sums.2, grad)
        })
        .collect();

    let mut grad = GradBundle::zeros(nets, query_net, head);
    let mut sim = 0.0;
    let mut kl = 0.0;
    let mut cls = 0.0;
    for (s, k, c, g) in &partials {
        sim += s;
        kl += k;
        cls += c;
        grad.add(g);
    }
    let inv = 1.0 / n as f64;
    sim *= inv;
    kl *= inv;
    cls *= inv;
    grad.scale(inv);
    let total = cfg.lambda_sim * sim + cfg.lambda_kl * kl + cfg.lambda_cls * cls;
    Ok((
        LossBreakdown {
            total,
            sim,
            kl,
            cls,
        },
        grad,
    ))
}

/// Batch loss without gradients (used by the finite-difference checker,
/// which needs many cheap evaluations of the exact same loss).
pub(crate) fn batch_loss(
    nets: &[TransformNet],
    query_net: Option<&TransformNet>,
    head: &ClassifierHead,
    batch: &PairBatch,
    cfg: &TrainConfig,
    fusion: FusionMode,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_shapes(nets, query_net, head, batch, fusion)?;
    let nhead = normalize_head(head);
    let work = ItemWork {
        nets,
        query_net,
        head,
        nhead: &nhead,
        batch,
        cfg,
        fusion,
    };
    let mut sim = 0.0;
    let mut kl = 0.0;
    let mut cls = 0.0;
    for b in 0..batch.len() {
        let (s, k, c) = work.item(b, None);
        sim += s;
        kl += k;
        cls += c;
    }
    let inv = 1.0 / batch.len() as f64;
    sim *= inv;
    kl *= inv;
    cls *= inv;
    Ok(LossBreakdown {
        total: cfg.lambda_sim * sim + cfg.lambda_kl * kl + cfg.lambda_cls * cls,
        sim,
        kl,
        cls,
    })
}
