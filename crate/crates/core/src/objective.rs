//! One optimization step's objective: forward pass, every loss term, and
//! the flattened gradient of the total.

use thiserror::Error;

use crate::grad::Matrix;
use crate::losses::{
    self, ContrastiveOutput, ExpertPairSet, LossConfig, LossError, LossMode, LossTerms, MemoryQueue,
};
use crate::model::{self, ClamUpstream, Head, ModelError, ParamSet};

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub terms: LossTerms,
    /// Gradient of `terms.total`, in `ParamSet::flatten` order.
    pub grads: Vec<f64>,
    pub probs: Vec<f64>,
    /// Contrastive embedding, present when the contrastive term is live.
    pub z: Option<Vec<f64>>,
    pub n_positives: usize,
    pub contrastive_skipped: bool,
}

fn contrastive(
    z: &[f64],
    label: usize,
    queue: &MemoryQueue,
    cfg: &LossConfig,
    pairs: Option<&ExpertPairSet>,
) -> Result<ContrastiveOutput, StepError> {
    let weighting = if cfg.mode == LossMode::Egcl { pairs } else { None };
    Ok(losses::contrastive_loss(z, label, queue, cfg.tau, weighting)?)
}

/// Evaluates the total loss for one labelled bag. The queue is read only
/// when the contrastive term is live and is never modified here.
pub fn step_objective(
    head: &Head,
    x: &Matrix,
    label: usize,
    queue: &MemoryQueue,
    cfg: &LossConfig,
    pairs: Option<&ExpertPairSet>,
) -> Result<StepOutput, StepError> {
    let use_cl = cfg.contrastive_active();
    let mut n_positives = 0;
    let mut skipped = true;
    let (bag, instance, cl, probs, z, mut grads) = match head {
        Head::Clam { cfg: mcfg, params } => {
            let cache = model::clam_forward(x, params, mcfg, use_cl.then_some(label))?;
            let (bag, d_logits) = losses::bag_ce(&cache.probs, label);

            let (instance, selection, d_inst) = if cfg.instance_weight > 0.0 {
                let selection = model::instance_targets(&cache, label, mcfg.k_instance);
                let scores = model::instance_scores(&cache, params, &selection);
                let targets: Vec<f64> = selection.iter().map(|s| s.target).collect();
                let (loss, g) = losses::instance_hinge(&scores, &targets)?;
                let g = g.into_iter().map(|v| v * cfg.instance_weight).collect();
                (loss, selection, g)
            } else {
                (0.0, Vec::new(), Vec::new())
            };

            let (cl, d_z) = if let Some(z) = &cache.z {
                let out = contrastive(z, label, queue, cfg, pairs)?;
                n_positives = out.n_positives;
                skipped = out.skipped;
                let dz: Vec<f64> = out.grad.iter().map(|g| g * cfg.lambda).collect();
                (out.loss, Some(dz))
            } else {
                (0.0, None)
            };

            let upstream = ClamUpstream {
                logits: d_logits,
                z: d_z,
                instance: d_inst,
                selection,
            };
            let g = model::clam_backward(x, &cache, params, mcfg, &upstream)?;
            (bag, instance, cl, cache.probs, cache.z, g.flatten())
        }
        Head::MeanMil { cfg: mcfg, params } => {
            let cache = model::meanmil_forward(x, params, mcfg, use_cl)?;
            let (bag, d_logits) = losses::bag_ce(&cache.probs, label);
            let (cl, d_z) = match &cache.z {
                Some(z) => {
                    let out = contrastive(z, label, queue, cfg, pairs)?;
                    n_positives = out.n_positives;
                    skipped = out.skipped;
                    let dz: Vec<f64> = out.grad.iter().map(|g| g * cfg.lambda).collect();
                    (out.loss, Some(dz))
                }
                None => (0.0, None),
            };
            let g = model::meanmil_backward(&cache, params, mcfg, &d_logits, d_z.as_deref())?;
            (bag, 0.0, cl, cache.probs, cache.z, g.flatten())
        }
    };
    let flat = head.params().flatten();
    let (terms, l2_grad) = losses::total_loss(bag, instance, cl, &flat, cfg);
    for (g, l) in grads.iter_mut().zip(l2_grad) {
        *g += l;
    }
    Ok(StepOutput {
        terms,
        grads,
        probs,
        z,
        n_positives,
        contrastive_skipped: skipped,
    })
}
