//! The three training signals and their weighted combination: margin-based
//! cosine softmax for identity, pooled binary cross-entropy for attribute
//! prediction, and the numerically identical form for adversarial
//! suppression (whose sign flip happens in the model's reversal wiring, not
//! here).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};

/// Loss weighting and margin-softmax hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pred: f64,
    pub lambda_adv: f64,
    pub margin_m: f64,
    pub scale_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pred: 5.0,
            lambda_adv: 2.0,
            margin_m: 0.35,
            scale_r: 64.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pred >= 0.0 && self.lambda_pred.is_finite()) {
            return Err(Error::config("lambda_pred", "must be a nonnegative real"));
        }
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::config("lambda_adv", "must be a nonnegative real"));
        }
        if !(0.0..1.0).contains(&self.margin_m) {
            return Err(Error::config("margin_m", "must lie in [0, 1)"));
        }
        if !(self.scale_r > 0.0 && self.scale_r.is_finite()) {
            return Err(Error::config("scale_r", "must be positive"));
        }
        Ok(())
    }
}

/// Tolerance on cosine logits; values outside `[-1-ε, 1+ε]` are rejected.
const COS_EPS: f64 = 1e-6;

/// Margin cosine softmax over identity prototypes, batch mean.
///
/// For each sample the target cosine gets an additive margin `-m`, every
/// cosine is scaled by `r`, and the result goes through a stabilized
/// log-sum-exp cross-entropy.
pub fn cosface_loss(
    tape: &mut Tape,
    logits: TensorId,
    labels: &[usize],
    margin_m: f64,
    scale_r: f64,
) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    let [batch, classes] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "cosface_loss",
            shape,
            reason: "expected [batch, num_identities]".to_string(),
        });
    };
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            op: "cosface_loss",
            left: vec![batch, classes],
            right: vec![labels.len()],
        });
    }
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::eval(format!(
                "cosface_loss: label {y} at row {i} out of range for {classes} identities"
            )));
        }
    }
    if let Some(bad) = tape
        .values(logits)
        .iter()
        .find(|v| v.abs() > 1.0 + COS_EPS)
    {
        return Err(Error::eval(format!(
            "cosface_loss: logit {bad} outside [-1, 1] — inputs must be cosines"
        )));
    }

    // One-hot target matrix, used both for the margin shift and the gather.
    let mut onehot = vec![0.0; batch * classes];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * classes + y] = 1.0;
    }
    let onehot_t = tape.constant(onehot.clone(), vec![batch, classes])?;
    let margin_shift: Vec<f64> = onehot.iter().map(|&o| -margin_m * o).collect();
    let shift_t = tape.constant(margin_shift, vec![batch, classes])?;

    let shifted = tape.add(logits, shift_t)?;
    let scaled = tape.scale(shifted, scale_r)?;
    let lse = tape.log_sum_exp_rows(scaled)?;
    let picked = tape.mul(scaled, onehot_t)?;
    let target = tape.sum_rows(picked)?;
    let per_sample = tape.sub(lse, target)?;
    tape.mean(per_sample)
}

/// One attribute group's logits with its targets and per-element mask.
/// Targets and mask are row-major `[batch, group_size]`, matching logits.
#[derive(Debug, Clone)]
pub struct GroupLossInput<'a> {
    pub group: &'a str,
    pub logits: TensorId,
    pub targets: &'a [f64],
    pub mask: &'a [bool],
}

fn pooled_bce(tape: &mut Tape, groups: &[GroupLossInput], what: &'static str) -> Result<TensorId> {
    if groups.is_empty() {
        return Err(Error::eval(format!("{what}: empty group set")));
    }
    let mut total: Option<TensorId> = None;
    let mut count = 0usize;
    for g in groups {
        if tape.tensor(g.logits).numel() != g.targets.len() || g.targets.len() != g.mask.len() {
            return Err(Error::ShapeMismatch {
                op: what,
                left: tape.shape(g.logits).to_vec(),
                right: vec![g.targets.len(), g.mask.len()],
            });
        }
        count += g.mask.iter().filter(|&&m| m).count();
        let s = tape.bce_with_logits_sum(g.logits, g.targets, g.mask)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    if count == 0 {
        return Err(Error::eval(format!(
            "{what}: mask excludes every (sample, attribute) term"
        )));
    }
    // Single flat denominator over all unmasked (sample, attribute) pairs.
    tape.scale(total.expect("non-empty groups"), 1.0 / count as f64)
}

/// Mean binary cross-entropy over all unmasked `(sample, attribute)` pairs
/// of the predict-mode groups, pooled with one global denominator.
pub fn attribute_prediction_loss(tape: &mut Tape, groups: &[GroupLossInput]) -> Result<TensorId> {
    pooled_bce(tape, groups, "attribute_prediction_loss")
}

/// Numerically identical to [`attribute_prediction_loss`], applied to the
/// suppress-mode groups. The adversarial effect comes entirely from the
/// reversal layer the model routed these logits through.
pub fn adversarial_suppression_loss(tape: &mut Tape, groups: &[GroupLossInput]) -> Result<TensorId> {
    pooled_bce(tape, groups, "adversarial_suppression_loss")
}

/// `L = L_id + λ_pred·L_attr + λ_adv·L_adv`, absent terms contributing zero.
pub fn total_loss(
    tape: &mut Tape,
    l_id: TensorId,
    l_attr: Option<TensorId>,
    l_adv: Option<TensorId>,
    weights: &LossWeights,
) -> Result<TensorId> {
    weights.validate()?;
    let mut out = l_id;
    if let Some(attr) = l_attr {
        let weighted = tape.scale(attr, weights.lambda_pred)?;
        out = tape.add(out, weighted)?;
    }
    if let Some(adv) = l_adv {
        let weighted = tape.scale(adv, weights.lambda_adv)?;
        out = tape.add(out, weighted)?;
    }
    Ok(out)
}
