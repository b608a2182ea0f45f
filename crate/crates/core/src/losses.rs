//! Training objectives and their gradients with respect to network outputs.
//!
//! Every loss returns its value together with the analytic gradient of that
//! value with respect to its prediction inputs. All arithmetic is `f64`.
//!
//! | loss | inputs | reduction |
//! |------|--------|-----------|
//! | [`loss_ext`]  | predicted vs. rendered heatmaps | mean squared error over all elements |
//! | [`loss_seg`]  | mask probability vs. mask | mean BCE + soft Dice, averaged over items |
//! | [`loss_sup`]  | a role-annotated batch | `L_seg` over labelled items + `L_ext` over point-supervised items |
//! | [`loss_disc`] | discriminator logits on source and target pairs | BCE towards 1 (source) and 0 (target) |
//! | [`loss_adv`]  | discriminator logits on target pairs | BCE towards 1 |
//!
//! Which parameters a gradient may reach is decided by the trainer, not here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLIP: f64 = 1e-7;
pub const DICE_EPS: f64 = 1e-5;
pub const DEFAULT_LAMBDA_ADV: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    /// Weight of each deep-supervision stage, final stage last. `None` means
    /// 1.0 for every stage.
    pub stage_weights: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: DEFAULT_LAMBDA_ADV,
            stage_weights: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_adv >= 0.0 && self.lambda_adv.is_finite()) {
            return Err(Error::invalid("lambda_adv must be finite and >= 0"));
        }
        if let Some(w) = &self.stage_weights {
            if w.iter().any(|x| !(*x >= 0.0)) {
                return Err(Error::invalid("stage weights must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn stage_weight(&self, stage: usize) -> f64 {
        self.stage_weights
            .as_ref()
            .and_then(|w| w.get(stage).copied())
            .unwrap_or(1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SourceLabelled,
    TargetPs,
    TargetUnlabelled,
}

/// Which domain an item comes from and what supervision it carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchRole {
    pub role: Role,
    pub has_mask: bool,
    pub has_ps: bool,
}

impl BatchRole {
    /// Source items carry a mask and points derived from it.
    pub const SOURCE: BatchRole = BatchRole {
        role: Role::SourceLabelled,
        has_mask: true,
        has_ps: true,
    };
    pub const TARGET_PS: BatchRole = BatchRole {
        role: Role::TargetPs,
        has_mask: false,
        has_ps: true,
    };
    pub const TARGET_UNLABELLED: BatchRole = BatchRole {
        role: Role::TargetUnlabelled,
        has_mask: false,
        has_ps: false,
    };

    pub fn new(role: Role, has_mask: bool, has_ps: bool) -> Result<Self> {
        let r = BatchRole { role, has_mask, has_ps };
        match role {
            Role::SourceLabelled if !has_mask => Err(Error::invalid("source items must have a mask")),
            Role::TargetUnlabelled if has_ps => Err(Error::invalid("unlabelled items cannot have points")),
            _ => Ok(r),
        }
    }

    pub fn is_source(&self) -> bool {
        self.role == Role::SourceLabelled
    }

    pub fn is_target(&self) -> bool {
        !self.is_source()
    }
}

/// A scalar loss and its gradient with respect to the prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: vec![a],
            actual: vec![b],
        });
    }
    if a == 0 {
        return Err(Error::invalid("loss over an empty tensor"));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn loss_ext(pred: &[f64], target: &[f64]) -> Result<LossGrad> {
    check_len(pred.len(), target.len())?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            value += r * r;
            2.0 * r / n
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Mean binary cross-entropy plus soft Dice loss for one item.
pub fn loss_seg(prob: &[f64], mask: &[f64]) -> Result<LossGrad> {
    check_len(prob.len(), mask.len())?;
    if prob.iter().chain(mask).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("segmentation loss inputs must lie in [0, 1]"));
    }
    let n = prob.len() as f64;
    let mut ce = 0.0;
    let mut inter = 0.0;
    let mut sum = 0.0;
    for (&p, &y) in prob.iter().zip(mask) {
        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        ce -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        inter += p * y;
        sum += p + y;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sum + DICE_EPS;
    let dice = 1.0 - num / den;
    let grad = prob
        .iter()
        .zip(mask)
        .map(|(&p, &y)| {
            let d_ce = if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
                (-y / p + (1.0 - y) / (1.0 - p)) / n
            } else {
                0.0
            };
            let d_dice = -(2.0 * y * den - num) / (den * den);
            d_ce + d_dice
        })
        .collect();
    Ok(LossGrad {
        value: ce / n + dice,
        grad,
    })
}

/// `softplus(x) = ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE of logits against a constant label, with gradient.
fn bce_logits(logits: &[f64], label: f64) -> Result<LossGrad> {
    if logits.is_empty() {
        return Err(Error::invalid("BCE over an empty logit map"));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let grad = logits
        .iter()
        .map(|&z| {
            // −[y ln σ(z) + (1−y) ln(1−σ(z))] = y·softplus(−z) + (1−y)·softplus(z)
            value += label * softplus(-z) + (1.0 - label) * softplus(z);
            (sigmoid(z) - label) / n
        })
        .collect();
    Ok(LossGrad { value: value / n, grad })
}

/// Discriminator loss and gradients with respect to the source and target logits.
pub fn loss_disc(src_logits: &[f64], tgt_logits: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let s = bce_logits(src_logits, 1.0)?;
    let t = bce_logits(tgt_logits, 0.0)?;
    Ok((s.value + t.value, s.grad, t.grad))
}

/// Adversarial loss: target logits pushed toward the source label.
///
/// `roles` describes the items the logits were computed from; any source
/// item is a contract violation.
pub fn loss_adv(tgt_logits: &[f64], roles: &[BatchRole]) -> Result<LossGrad> {
    if let Some(r) = roles.iter().find(|r| r.is_source()) {
        return Err(Error::Contract(format!(
            "adversarial loss applies to target items only, got {:?}",
            r.role
        )));
    }
    bce_logits(tgt_logits, 1.0)
}

pub fn total_loss(l_sup: f64, l_adv: f64, lambda_adv: f64) -> f64 {
    l_sup + lambda_adv * l_adv
}

/// Weighted sum of a per-stage loss over deep-supervision outputs.
///
/// Returns the combined value and one gradient per stage.
pub fn deep_supervised(
    stages: &[Vec<f64>],
    target: &[f64],
    weights: &LossWeights,
    loss: impl Fn(&[f64], &[f64]) -> Result<LossGrad>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(stages.len());
    for (s, pred) in stages.iter().enumerate() {
        let w = weights.stage_weight(s);
        let mut lg = loss(pred, target)?;
        total += w * lg.value;
        lg.grad.iter_mut().for_each(|g| *g *= w);
        grads.push(lg.grad);
    }
    Ok((total, grads))
}

/// One item of a supervised batch: per-stage predictions and whatever
/// supervision the item's role grants.
#[derive(Clone, Debug, Default)]
pub struct SupItem {
    pub role: Option<BatchRole>,
    pub seg_stages: Vec<Vec<f64>>,
    pub mask: Option<Vec<f64>>,
    pub heat_stages: Vec<Vec<f64>>,
    pub heat_target: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SupResult {
    pub l_seg: f64,
    pub l_ext: f64,
    /// Per item, per stage gradients (empty when the item has no such term).
    pub d_seg: Vec<Vec<Vec<f64>>>,
    pub d_heat: Vec<Vec<Vec<f64>>>,
}

impl SupResult {
    pub fn total(&self) -> f64 {
        self.l_seg + self.l_ext
    }
}

/// Supervised loss over a role-annotated batch.
///
/// `L_seg` averages over items with masks, `L_ext` over items with point
/// supervision; an item lacking a term contributes nothing to it.
pub fn loss_sup(items: &[SupItem], weights: &LossWeights) -> Result<SupResult> {
    let n_seg = items.iter().filter(|i| i.mask.is_some()).count();
    let n_ext = items.iter().filter(|i| i.heat_target.is_some()).count();
    let mut out = SupResult::default();
    for item in items {
        let role = item.role.ok_or_else(|| Error::invalid("batch item without a role"))?;
        if item.mask.is_some() && !role.has_mask {
            return Err(Error::Contract("mask supplied for an item whose role has none".into()));
        }
        if item.heat_target.is_some() && !role.has_ps {
            return Err(Error::Contract("points supplied for an item whose role has none".into()));
        }
        match &item.mask {
            Some(mask) => {
                let (v, mut g) = deep_supervised(&item.seg_stages, mask, weights, loss_seg)?;
                let scale = 1.0 / n_seg as f64;
                out.l_seg += v * scale;
                g.iter_mut().flatten().for_each(|x| *x *= scale);
                out.d_seg.push(g);
            }
            None => out.d_seg.push(Vec::new()),
        }
        match &item.heat_target {
            Some(target) => {
                let (v, mut g) = deep_supervised(&item.heat_stages, target, weights, loss_ext)?;
                let scale = 1.0 / n_ext as f64;
                out.l_ext += v * scale;
                g.iter_mut().flatten().for_each(|x| *x *= scale);
                out.d_heat.push(g);
            }
            None => out.d_heat.push(Vec::new()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ext_cases() {
        let t = vec![0.0, 1.0, 0.5, 0.25];
        assert_eq!(loss_ext(&t, &t).unwrap().value, 0.0);
        let mut one = vec![0.0; 8];
        one[3] = 1.0;
        assert!((loss_ext(&[0.0; 8], &one).unwrap().value - 1.0 / 8.0).abs() < 1e-15);
        let p = vec![0.3, 0.9, 0.1, 0.0];
        let base = loss_ext(&p, &t).unwrap().value;
        let p2: Vec<f64> = p.iter().zip(&t).map(|(a, b)| b + 2.0 * (a - b)).collect();
        assert!((loss_ext(&p2, &t).unwrap().value - 4.0 * base).abs() < 1e-12);
        assert!(loss_ext(&p, &t[..3]).is_err());
    }

    #[test]
    fn seg_single_voxel_closed_form() {
        let l = loss_seg(&[0.5], &[1.0]).unwrap();
        let dice = 1.0 - (1.0 + DICE_EPS) / (1.5 + DICE_EPS);
        assert!((l.value - (std::f64::consts::LN_2 + dice)).abs() < 1e-12);
        assert!((l.value - 1.026480).abs() < 1e-5);
    }

    #[test]
    fn seg_perfect_and_empty() {
        let y = vec![1.0, 0.0, 1.0, 0.0];
        assert!(loss_seg(&y, &y).unwrap().value <= 1e-5);
        let z = vec![0.0; 5];
        let l = loss_seg(&z, &z).unwrap();
        assert!(l.value.abs() < 1e-6);
        assert!(loss_seg(&[1.2], &[1.0]).is_err());
    }

    #[test]
    fn seg_decreases_toward_the_mask() {
        let y = vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let p: Vec<f64> = y.iter().map(|&m| 0.5 + t * (m - 0.5)).collect();
            let v = loss_seg(&p, &y).unwrap().value;
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn disc_and_adv_closed_forms() {
        let (v, _, _) = loss_disc(&[0.0; 4], &[0.0; 7]).unwrap();
        assert!((v - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let (v, _, _) = loss_disc(&[40.0; 3], &[-40.0; 3]).unwrap();
        assert!(v < 1e-15);
        let a = loss_adv(&[0.0; 5], &[BatchRole::TARGET_PS]).unwrap();
        assert!((a.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_adv(&[50.0], &[BatchRole::TARGET_UNLABELLED]).unwrap().value < 1e-20);
        assert!(matches!(
            loss_adv(&[0.0], &[BatchRole::SOURCE]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn disc_swap_is_label_flip() {
        let a = [0.3, -1.2, 2.0];
        let b = [-0.7, 0.4];
        let (v, _, _) = loss_disc(&a, &b).unwrap();
        let flipped = bce_logits(&a, 0.0).unwrap().value + bce_logits(&b, 1.0).unwrap().value;
        let (swapped, _, _) = loss_disc(&b, &a).unwrap();
        assert!((swapped - flipped).abs() < 1e-12);
        assert!((v - swapped).abs() > 1e-6);
    }

    #[test]
    fn adv_plus_target_disc_term_bound() {
        let z = [0.3, -2.0, 5.0, 0.0];
        let adv = loss_adv(&z, &[BatchRole::TARGET_PS]).unwrap().value;
        let tgt = bce_logits(&z, 0.0).unwrap().value;
        assert!((adv + tgt) * z.len() as f64 >= 2.0 * std::f64::consts::LN_2 * z.len() as f64 - 1e-12);
    }

    #[test]
    fn total_arithmetic() {
        assert_eq!(total_loss(1.0, 0.5, 0.0001), 1.0 + 0.0001 * 0.5);
        assert!((total_loss(1.0, 0.5, 0.0001) - 1.00005).abs() < 1e-15);
        assert_eq!(total_loss(0.73, 123.0, 0.0), 0.73);
    }

    #[test]
    fn sup_on_unlabelled_batch_is_zero() {
        let items = vec![SupItem {
            role: Some(BatchRole::TARGET_UNLABELLED),
            seg_stages: vec![vec![0.3; 4]],
            heat_stages: vec![vec![0.1; 4]],
            ..Default::default()
        }];
        let r = loss_sup(&items, &LossWeights::default()).unwrap();
        assert_eq!(r.total(), 0.0);
    }

    #[test]
    fn role_invariants() {
        assert!(BatchRole::new(Role::SourceLabelled, false, true).is_err());
        assert!(BatchRole::new(Role::TargetUnlabelled, false, true).is_err());
        assert!(BatchRole::new(Role::TargetPs, false, true).is_ok());
    }
}
