//! Finite-difference verification of the analytic gradients.

use crate::error::{Error, Result};
use crate::seedmix;

use super::loss::{batch_loss, loss_and_grad};
use super::{ClassifierHead, FusionMode, PairBatch, TrainConfig, TransformNet};

const FD_STEP: f64 = 1e-4;

/// Relative disagreement between the full-step and half-step quotients
/// above which a probe is treated as straddling a rectifier kink. Smooth
/// segments agree to O(FD_STEP^2); a crossed kink shows up as a slope
/// blend orders of magnitude larger.
const KINK_DISAGREEMENT: f64 = 1e-5;

/// Compare the analytic gradient against central finite differences on
/// `probes` randomly chosen parameters. The loss is piecewise smooth in
/// every parameter through the leaky rectifiers, and a central difference
/// taken across a kink does not estimate the derivative; candidates whose
/// full-step and half-step quotients disagree are discarded and the walk
/// moves on to the next parameter of a seeded permutation. Returns the
/// maximum relative error `|a - f| / max(|a|, |f|, 1e-8)` over the
/// verified probes.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    nets: &[TransformNet],
    query_net: Option<&TransformNet>,
    head: &ClassifierHead,
    batch: &PairBatch,
    cfg: &TrainConfig,
    fusion: FusionMode,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::invalid_config("grad_check needs probes >= 1"));
    }
    let (_, grads) = loss_and_grad(nets, query_net, head, batch, cfg, fusion)?;
    let analytic = grads.flatten();
    let total = analytic.len();

    let mut rng = seedmix::rng(seed, &["grad-check"]);
    let order = rand::seq::index::sample(&mut rng, total, total).into_vec();

    let mut max_rel: f64 = 0.0;
    let mut verified = 0usize;
    for idx in order {
        if verified == probes {
            break;
        }
        let plus = perturbed_loss(nets, query_net, head, batch, cfg, fusion, idx, FD_STEP)?;
        let minus = perturbed_loss(nets, query_net, head, batch, cfg, fusion, idx, -FD_STEP)?;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        let half_plus =
            perturbed_loss(nets, query_net, head, batch, cfg, fusion, idx, FD_STEP / 2.0)?;
        let half_minus =
            perturbed_loss(nets, query_net, head, batch, cfg, fusion, idx, -FD_STEP / 2.0)?;
        let fd_half = (half_plus - half_minus) / FD_STEP;
        if (fd - fd_half).abs() > KINK_DISAGREEMENT * fd.abs().max(fd_half.abs()).max(1e-8) {
            continue;
        }
        let a = analytic[idx];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
        verified += 1;
    }
    if verified == 0 {
        return Err(Error::invalid_config(
            "grad_check found no probe clear of rectifier kinks",
        ));
    }
    Ok(max_rel)
}

/// Loss with parameter `idx` (canonical flat order: nets, query net, head)
/// offset by `delta`.
#[allow(clippy::too_many_arguments)]
fn perturbed_loss(
    nets: &[TransformNet],
    query_net: Option<&TransformNet>,
    head: &ClassifierHead,
    batch: &PairBatch,
    cfg: &TrainConfig,
    fusion: FusionMode,
    idx: usize,
    delta: f64,
) -> Result<f64> {
    let mut nets = nets.to_vec();
    let mut query_net = query_net.cloned();
    let mut head = head.clone();
    let mut cursor = 0;
    let mut bump = |v: &mut f64| {
        if cursor == idx {
            *v += delta;
        }
        cursor += 1;
    };
    for net in &mut nets {
        net.for_each_param_mut(&mut bump);
    }
    if let Some(qn) = &mut query_net {
        qn.for_each_param_mut(&mut bump);
    }
    for v in &mut head.weights.data {
        bump(v);
    }
    debug_assert!(idx < cursor, "probe index outside parameter range");
    Ok(batch_loss(&nets, query_net.as_ref(), &head, batch, cfg, fusion)?.total)
}
