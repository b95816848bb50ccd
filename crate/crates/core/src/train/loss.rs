use std::sync::Arc;

use crate::tensor::{Tensor, Var};

use super::{TrainConfig, TrainError};

/// The weighted loss and its two terms.
#[derive(Clone, Copy)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub bce: Var<'t>,
    pub soft_dice: Var<'t>,
}

/// `w_bce·BCE + w_dice·(1 − soft Dice)` of probabilities `[B, 3, h, w]`
/// against binary targets of the same shape.
pub fn composite_loss<'t>(
    probs: Var<'t>,
    target: &Arc<Tensor>,
    cfg: &TrainConfig,
) -> Result<LossTerms<'t>, TrainError> {
    let bce = probs.binary_cross_entropy(Arc::clone(target))?;
    let soft_dice = probs.soft_dice_loss(Arc::clone(target), cfg.dice_smooth)?;
    let total = bce.scale(cfg.w_bce).add(soft_dice.scale(cfg.w_dice))?;
    Ok(LossTerms { total, bce, soft_dice })
}
