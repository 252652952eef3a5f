use crate::autodiff::{Graph, NodeId};
use crate::tensor::{Element, Tensor};

use super::{invalid, PyramidTargets, TaskError, TaskKind};

/// Pyramid targets placed on a graph as constants.
#[derive(Clone, Debug)]
pub struct BoundTargets<T: Element> {
    pub targets: Vec<NodeId>,
    pub masks: Option<Vec<Tensor<T>>>,
    pub flash: Option<NodeId>,
}

impl PyramidTargets {
    pub fn bind<T: Element>(&self, g: &mut Graph<T>) -> BoundTargets<T> {
        BoundTargets {
            targets: self
                .targets
                .iter()
                .map(|t| g.constant(t.to_tensor().cast()))
                .collect(),
            masks: self
                .masks
                .as_ref()
                .map(|ms| ms.iter().map(|m| m.to_tensor().cast()).collect()),
            flash: self
                .flash
                .as_ref()
                .map(|f| g.constant(f.to_tensor().cast())),
        }
    }
}

fn check_heads(heads: &[NodeId], targets: &[NodeId]) -> Result<(), TaskError> {
    if heads.is_empty() || heads.len() > targets.len() {
        return invalid(
            "heads",
            format!("{} heads for {} targets", heads.len(), targets.len()),
        );
    }
    Ok(())
}

fn finish<T: Element>(g: &mut Graph<T>, terms: &[(f64, NodeId)]) -> Result<NodeId, TaskError> {
    match g.weighted_sum(terms)? {
        Some(l) => Ok(l),
        None => invalid("lambda", "every weight of the available heads is zero"),
    }
}

/// `Σ λ_l · mse(head_l, target_l)`.
pub fn loss_denoise<T: Element>(
    g: &mut Graph<T>,
    heads: &[NodeId],
    targets: &[NodeId],
    lambda: &[f64],
) -> Result<NodeId, TaskError> {
    check_heads(heads, targets)?;
    let mut terms = Vec::new();
    for (l, (&h, &t)) in heads.iter().zip(targets).enumerate() {
        let w = lambda.get(l).copied().unwrap_or(0.0);
        if w != 0.0 {
            terms.push((w, g.mse(h, t)?));
        }
    }
    finish(g, &terms)
}

/// Same structure as [`loss_denoise`], against upsampled copies of the
/// low-resolution input.
pub fn loss_sr<T: Element>(
    g: &mut Graph<T>,
    heads: &[NodeId],
    targets: &[NodeId],
    lambda: &[f64],
) -> Result<NodeId, TaskError> {
    loss_denoise(g, heads, targets, lambda)
}

/// `Σ λ_l · mean(((head_l − target_l) ⊙ m_l)²)`; hole pixels contribute
/// nothing.
pub fn loss_inpaint<T: Element>(
    g: &mut Graph<T>,
    heads: &[NodeId],
    targets: &[NodeId],
    masks: &[Tensor<T>],
    lambda: &[f64],
) -> Result<NodeId, TaskError> {
    check_heads(heads, targets)?;
    if masks.len() < heads.len() {
        return invalid(
            "mask",
            format!("{} masks for {} heads", masks.len(), heads.len()),
        );
    }
    let mut terms = Vec::new();
    for (l, (&h, &t)) in heads.iter().zip(targets).enumerate() {
        let w = lambda.get(l).copied().unwrap_or(0.0);
        if w != 0.0 {
            terms.push((w, g.masked_mse(h, t, &masks[l])?));
        }
    }
    finish(g, &terms)
}

/// `λ₁ · Σ mse(head_l, f_l) + λ₂ · mse(G, flash)`.
pub fn loss_flash<T: Element>(
    g: &mut Graph<T>,
    heads: &[NodeId],
    no_flash: &[NodeId],
    flash: NodeId,
    lambda: &[f64],
) -> Result<NodeId, TaskError> {
    check_heads(heads, no_flash)?;
    let (l1, l2) = (
        lambda.first().copied().unwrap_or(0.0),
        lambda.get(1).copied().unwrap_or(0.0),
    );
    let mut terms = Vec::new();
    if l1 != 0.0 {
        let mut pyramid = Vec::new();
        for (&h, &t) in heads.iter().zip(no_flash) {
            pyramid.push((1.0, g.mse(h, t)?));
        }
        let sum = g.weighted_sum(&pyramid)?.expect("at least one head");
        terms.push((l1, sum));
    }
    if l2 != 0.0 {
        terms.push((l2, g.mse(heads[0], flash)?));
    }
    finish(g, &terms)
}

/// Loss of `kind` over the given heads.
pub fn task_loss<T: Element>(
    g: &mut Graph<T>,
    kind: TaskKind,
    heads: &[NodeId],
    targets: &BoundTargets<T>,
    lambda: &[f64],
) -> Result<NodeId, TaskError> {
    match kind {
        TaskKind::Denoise => loss_denoise(g, heads, &targets.targets, lambda),
        TaskKind::SuperResolve => loss_sr(g, heads, &targets.targets, lambda),
        TaskKind::Inpaint => {
            let Some(masks) = &targets.masks else {
                return invalid("mask", "inpainting needs a mask");
            };
            loss_inpaint(g, heads, &targets.targets, masks, lambda)
        }
        TaskKind::FlashNoFlash => {
            let Some(flash) = targets.flash else {
                return invalid("flash", "flash/no-flash needs a flash image");
            };
            loss_flash(g, heads, &targets.targets, flash, lambda)
        }
    }
}
