use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

use super::model::HgnModel;

/// Probability clamp used when evaluating log-likelihoods.
pub const PROB_EPS: f64 = 1e-7;
/// Additive smoothing in the dice numerator and denominator.
pub const DICE_EPS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub negative: f64,
    pub positive: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        negative: 1.0,
        positive: 1.0,
    };

    /// `positive = #negative / #positive` over all targets, capped. With no
    /// positive pixels the weights stay at 1.
    pub fn balanced(targets: &[&[u8]], cap: f64) -> Self {
        let total: usize = targets.iter().map(|t| t.len()).sum();
        let pos: usize = targets.iter().map(|t| t.iter().filter(|&&v| v == 1).count()).sum();
        let positive = if pos == 0 { 1.0 } else { ((total - pos) as f64 / pos as f64).min(cap) };
        Self {
            negative: 1.0,
            positive,
        }
    }

    fn of(&self, label: u8) -> f64 {
        if label == 1 {
            self.positive
        } else {
            self.negative
        }
    }
}

fn check_shapes(pred: &[f64], target: &[u8]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Input(format!(
            "prediction has {} pixels, target has {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean over pixels of `−w_y · log p(y)`, with `p` the lesion probability
/// and probabilities clamped to `[ε, 1−ε]`.
pub fn weighted_cross_entropy(pred: &[f64], target: &[u8], weights: ClassWeights) -> Result<f64> {
    check_shapes(pred, target)?;
    if !(weights.negative > 0.0 && weights.positive > 0.0) {
        return Err(Error::Parameter("class weights must be positive".into()));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let py = if t == 1 { p } else { 1.0 - p };
            -weights.of(t) * py.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// `1 − (2·Σpt + ε) / (Σp + Σt + ε)`.
pub fn dice_loss(pred: &[f64], target: &[u8]) -> Result<f64> {
    check_shapes(pred, target)?;
    let (mut pt, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let t = t as f64;
        pt += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * pt + DICE_EPS) / (sp + st + DICE_EPS))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Combined loss of a mini-batch and its gradient with respect to each
/// sample's `2×H×W` logits. Cross-entropy is averaged over every pixel of
/// the batch and dice is pooled over the batch.
///
/// The cross-entropy gradient is the logit-space form `w_y·(p − y)`, i.e.
/// the gradient of the unclamped loss.
pub fn batch_loss(
    logits: &[&Tensor],
    targets: &[&[u8]],
    weights: ClassWeights,
    ce_weight: f64,
    dice_weight: f64,
) -> Result<(LossTerms, Vec<Vec<f64>>)> {
    if logits.len() != targets.len() {
        return Err(Error::Input("batch logits and targets differ in length".into()));
    }
    let probs: Vec<Vec<f64>> = logits.iter().map(|l| HgnModel::probabilities(l)).collect();
    for (p, t) in probs.iter().zip(targets) {
        check_shapes(p, t)?;
    }
    let n_pix: usize = probs.iter().map(Vec::len).sum();
    let all_p: Vec<f64> = probs.iter().flatten().copied().collect();
    let all_t: Vec<u8> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let ce = weighted_cross_entropy(&all_p, &all_t, weights)?;
    let dice = dice_loss(&all_p, &all_t)?;

    let (mut pt, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in all_p.iter().zip(&all_t) {
        pt += p * t as f64;
        sp += p;
        st += t as f64;
    }
    let num = 2.0 * pt + DICE_EPS;
    let den = sp + st + DICE_EPS;

    let grads = probs
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let n = p.len();
            let mut g = vec![0.0; 2 * n];
            for i in 0..n {
                let y = t[i] as f64;
                let d_ce = weights.of(t[i]) * (p[i] - y) / n_pix as f64;
                let d_dice_dp = -(2.0 * y * den - num) / (den * den);
                let d = ce_weight * d_ce + dice_weight * d_dice_dp * p[i] * (1.0 - p[i]);
                g[n + i] = d;
                g[i] = -d;
            }
            g
        })
        .collect();
    Ok((
        LossTerms {
            ce,
            dice,
            total: ce_weight * ce + dice_weight * dice,
        },
        grads,
    ))
}
