//! Per-prompt Dice + cross-entropy objective with worst-prompt gating.
//!
//! Every prompt's loss is the unweighted sum of soft Dice and mean binary
//! cross-entropy against its own target mask. In co-training mode only the
//! largest per-prompt total carries gradient; the rest are gated off
//! exactly. The plain functions here compute values independently of the
//! autodiff ops, which pins the tape implementation in tests.

use std::rc::Rc;

use crate::autodiff::{sigmoid, NodeId, Tape};
use crate::error::{Error, Result};
use crate::geometry::Mask2D;
use crate::model::MaskLogits;
use crate::tensor::{Scalar, Tensor};

/// Smoothing constant in the Dice ratio; makes empty-vs-empty cost zero.
pub const DICE_EPSILON: f64 = 1.0;

/// Loss of one prompt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptLoss<S> {
    pub dice: S,
    pub ce: S,
    pub total: S,
}

/// Per-prompt losses plus the gated selection. `selected_index` is the
/// smallest index attaining the maximum total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<S> {
    pub per_prompt: Vec<PromptLoss<S>>,
    pub selected_index: usize,
    pub selected_total: S,
}

/// Gradient scope of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Backpropagate only the worst per-prompt loss (co-training rule).
    CotrainMax,
    /// Ordinary single-prompt loss; requires exactly one target.
    Single,
}

impl LossMode {
    pub fn parse(s: &str) -> Result<LossMode> {
        match s {
            "cotrain_max" | "cotrain" => Ok(LossMode::CotrainMax),
            "single" => Ok(LossMode::Single),
            other => Err(Error::parse("loss mode", format!("unknown mode '{other}'"))),
        }
    }
}

fn check_shape<S: Scalar>(logits: &Tensor<S>, target: &Mask2D, context: &str) -> Result<()> {
    if logits.shape() != [target.height(), target.width()] {
        return Err(Error::shape(
            context,
            format!("{}x{}", target.height(), target.width()),
            format!("{:?}", logits.shape()),
        ));
    }
    Ok(())
}

fn target_vec<S: Scalar>(target: &Mask2D) -> Rc<Vec<S>> {
    Rc::new(
        target
            .values()
            .iter()
            .map(|&v| S::from_f64(v as f64))
            .collect(),
    )
}

/// Soft Dice loss `1 - (2*sum(p*t)+eps) / (sum(p)+sum(t)+eps)` with
/// `p = sigmoid(logits)`. Always in [0, 1).
pub fn soft_dice_loss<S: Scalar>(logits: &Tensor<S>, target: &Mask2D, epsilon: S) -> Result<S> {
    check_shape(logits, target, "soft_dice_loss")?;
    let mut inter = S::zero();
    let mut psum = S::zero();
    let mut tsum = S::zero();
    for (&z, &t) in logits.data().iter().zip(target.values()) {
        let p = sigmoid(z);
        let t = S::from_f64(t as f64);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    Ok(S::one() - (S::from_f64(2.0) * inter + epsilon) / (psum + tsum + epsilon))
}

/// Mean pixelwise binary cross-entropy in the numerically stable logit form
/// `max(z,0) - z*t + ln(1 + exp(-|z|))`.
pub fn bce_loss<S: Scalar>(logits: &Tensor<S>, target: &Mask2D) -> Result<S> {
    check_shape(logits, target, "bce_loss")?;
    let mut total = S::zero();
    for (&z, &t) in logits.data().iter().zip(target.values()) {
        let t = S::from_f64(t as f64);
        total += z.max(S::zero()) - z * t + (-z.abs()).exp().ln_1p();
    }
    Ok(total / S::from_f64(target.values().len() as f64))
}

/// Per-prompt Dice + cross-entropy against index-aligned targets, with the
/// worst prompt selected per the co-training rule.
pub fn combined_prompt_loss<S: Scalar>(
    logits: &MaskLogits<S>,
    targets: &[Mask2D],
) -> Result<LossBreakdown<S>> {
    if logits.num_prompts() != targets.len() || targets.is_empty() {
        return Err(Error::shape(
            "combined_prompt_loss",
            format!("{} targets", logits.num_prompts()),
            format!("{}", targets.len()),
        ));
    }
    let eps = S::from_f64(DICE_EPSILON);
    let mut per_prompt = Vec::with_capacity(targets.len());
    for (i, target) in targets.iter().enumerate() {
        let channel = logits.channel(i);
        let dice = soft_dice_loss(&channel, target, eps)?;
        let ce = bce_loss(&channel, target)?;
        per_prompt.push(PromptLoss {
            dice,
            ce,
            total: dice + ce,
        });
    }
    let mut selected_index = 0;
    for (i, p) in per_prompt.iter().enumerate().skip(1) {
        if p.total > per_prompt[selected_index].total {
            selected_index = i;
        }
    }
    Ok(LossBreakdown {
        selected_total: per_prompt[selected_index].total,
        selected_index,
        per_prompt,
    })
}

/// Scalar training objective (value only). `CotrainMax` is the maximum
/// per-prompt total; `Single` requires exactly one prompt.
pub fn training_loss<S: Scalar>(
    logits: &MaskLogits<S>,
    targets: &[Mask2D],
    mode: LossMode,
) -> Result<S> {
    if mode == LossMode::Single && targets.len() != 1 {
        return Err(Error::Validation(format!(
            "single mode requires exactly one target, got {}",
            targets.len()
        )));
    }
    Ok(combined_prompt_loss(logits, targets)?.selected_total)
}

/// Differentiable training objective over per-prompt logit nodes already on
/// the tape. Gradient flows only through the selected prompt's channel.
/// Returns the loss node and the per-prompt breakdown read off the tape.
pub fn training_loss_graph<S: Scalar>(
    tape: &mut Tape<S>,
    logit_nodes: &[NodeId],
    targets: &[Mask2D],
    mode: LossMode,
) -> Result<(NodeId, LossBreakdown<S>)> {
    if logit_nodes.len() != targets.len() || targets.is_empty() {
        return Err(Error::shape(
            "training_loss",
            format!("{} logit channels", logit_nodes.len()),
            format!("{} targets", targets.len()),
        ));
    }
    if mode == LossMode::Single && targets.len() != 1 {
        return Err(Error::Validation(format!(
            "single mode requires exactly one target, got {}",
            targets.len()
        )));
    }
    let eps = S::from_f64(DICE_EPSILON);
    let mut totals = Vec::with_capacity(targets.len());
    let mut per_prompt = Vec::with_capacity(targets.len());
    for (&node, target) in logit_nodes.iter().zip(targets) {
        let n = tape.value(node).numel();
        if n != target.height() * target.width() {
            return Err(Error::shape(
                "training_loss channel",
                format!("{} pixels", target.height() * target.width()),
                format!("{n}"),
            ));
        }
        let t = target_vec::<S>(target);
        let dice = tape.soft_dice(node, t.clone(), eps);
        let ce = tape.bce_with_logits(node, t);
        let total = tape.sum_of(vec![dice, ce]);
        per_prompt.push(PromptLoss {
            dice: tape.value(dice).item(),
            ce: tape.value(ce).item(),
            total: tape.value(total).item(),
        });
        totals.push(total);
    }
    let (loss, selected_index) = tape.max_of(totals);
    Ok((
        loss,
        LossBreakdown {
            selected_total: tape.value(loss).item(),
            selected_index,
            per_prompt,
        },
    ))
}
