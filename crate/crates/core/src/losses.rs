//! Training objectives over two-class logits `(batch, 2, h, w)` and binary
//! ground truth `(batch, h, w)`.
//!
//! Each function returns the scalar loss together with its gradient with
//! respect to the logits.

use ndarray::{Array4, ArrayView3, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Hybrid,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Cross-entropy weight of the unchanged (0) and changed (1) class.
    pub class_weights: [f64; 2],
    pub dice_eps: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Hybrid,
            class_weights: [1.0, 1.0],
            dice_eps: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossConfig {
    /// Weights from the class balance of the training split: the rare class
    /// gets the frequency of the common one and vice versa.
    pub fn inverse_frequency_weights(changed_fraction: f64) -> [f64; 2] {
        [changed_fraction, 1.0 - changed_fraction]
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weights must be nonnegative, got {:?}", self.class_weights)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config(format!("dice_eps must be positive, got {}", self.dice_eps)));
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config("focal_gamma must be >= 0 and focal_alpha in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array4<f64>,
}

fn check(logits: &ArrayView4<f64>, gt: &ArrayView3<u8>) -> Result<()> {
    let (n, c, h, w) = logits.dim();
    if c != 2 {
        return Err(shape_err(format!("expected 2-class logits, got {c} channels")));
    }
    if gt.dim() != (n, h, w) {
        return Err(shape_err(format!("logits {:?} vs ground truth {:?}", logits.dim(), gt.dim())));
    }
    if let Some(v) = gt.iter().find(|&&v| v > 1) {
        return Err(Error::Domain(format!("ground truth must be binary, found {v}")));
    }
    Ok(())
}

/// `(log p0, log p1)` of a two-way softmax, computed stably.
#[inline]
fn log_probs(z0: f64, z1: f64) -> (f64, f64) {
    let m = z0.max(z1);
    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
    (z0 - lse, z1 - lse)
}

/// Mean over pixels of `w[y] * (-log softmax(z)[y])`.
pub fn weighted_ce(logits: ArrayView4<f64>, gt: ArrayView3<u8>, weights: [f64; 2]) -> Result<LossOutput> {
    check(&logits, &gt)?;
    let (n, _, h, w) = logits.dim();
    let count = (n * h * w) as f64;
    let mut grad = Array4::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((b, i, j), &y) in gt.indexed_iter() {
        let (z0, z1) = (logits[[b, 0, i, j]], logits[[b, 1, i, j]]);
        let (l0, l1) = log_probs(z0, z1);
        let y = y as usize;
        let wy = weights[y];
        total += -wy * if y == 1 { l1 } else { l0 };
        let p = [l0.exp(), l1.exp()];
        for k in 0..2 {
            let target = if k == y { 1.0 } else { 0.0 };
            grad[[b, k, i, j]] = wy * (p[k] - target) / count;
        }
    }
    Ok(LossOutput { value: total / count, grad })
}

/// Soft dice loss on the changed-class probability:
/// `1 - (2 Σ p·y + eps) / (Σ y + Σ p + eps)`, summed over the whole batch.
pub fn dice_loss(logits: ArrayView4<f64>, gt: ArrayView3<u8>, eps: f64) -> Result<LossOutput> {
    check(&logits, &gt)?;
    let probs = gt.indexed_iter().map(|((b, i, j), &y)| {
        let (_, l1) = log_probs(logits[[b, 0, i, j]], logits[[b, 1, i, j]]);
        ((b, i, j), l1.exp(), y as f64)
    });
    let probs: Vec<_> = probs.collect();
    let overlap: f64 = probs.iter().map(|&(_, p, y)| p * y).sum();
    let sum_p: f64 = probs.iter().map(|&(_, p, _)| p).sum();
    let sum_y: f64 = probs.iter().map(|&(_, _, y)| y).sum();
    let num = 2.0 * overlap + eps;
    let den = sum_y + sum_p + eps;
    let mut grad = Array4::zeros(logits.raw_dim());
    for &((b, i, j), p, y) in &probs {
        // d(num/den)/dp = (2y·den − num) / den²
        let dl_dp = -(2.0 * y * den - num) / (den * den);
        let g = dl_dp * p * (1.0 - p);
        grad[[b, 1, i, j]] = g;
        grad[[b, 0, i, j]] = -g;
    }
    Ok(LossOutput { value: 1.0 - num / den, grad })
}

/// Weighted cross-entropy plus dice.
pub fn hybrid_loss(logits: ArrayView4<f64>, gt: ArrayView3<u8>, cfg: &LossConfig) -> Result<LossOutput> {
    let ce = weighted_ce(logits, gt, cfg.class_weights)?;
    let dice = dice_loss(logits, gt, cfg.dice_eps)?;
    Ok(LossOutput { value: ce.value + dice.value, grad: ce.grad + dice.grad })
}

/// Mean over pixels of `-α_t (1 − p_t)^γ log p_t`, with `α_t = α` on changed
/// pixels and `1 − α` on unchanged ones.
pub fn focal_loss(logits: ArrayView4<f64>, gt: ArrayView3<u8>, gamma: f64, alpha: f64) -> Result<LossOutput> {
    check(&logits, &gt)?;
    let (n, _, h, w) = logits.dim();
    let count = (n * h * w) as f64;
    let mut grad = Array4::zeros(logits.raw_dim());
    let mut total = 0.0;
    for ((b, i, j), &y) in gt.indexed_iter() {
        let (l0, l1) = log_probs(logits[[b, 0, i, j]], logits[[b, 1, i, j]]);
        let y = y as usize;
        let (log_pt, alpha_t) = if y == 1 { (l1, alpha) } else { (l0, 1.0 - alpha) };
        let pt = log_pt.exp();
        let q = 1.0 - pt;
        total += -alpha_t * q.powf(gamma) * log_pt;
        // dL/dz_t = α_t [γ q^γ p_t log p_t − q^(γ+1)], the other logit gets the negation
        let gt_logit = alpha_t * (gamma * q.powf(gamma) * pt * log_pt - q.powf(gamma + 1.0)) / count;
        grad[[b, y, i, j]] = gt_logit;
        grad[[b, 1 - y, i, j]] = -gt_logit;
    }
    Ok(LossOutput { value: total / count, grad })
}

/// Dispatches on [`LossConfig::kind`].
pub fn compute(logits: ArrayView4<f64>, gt: ArrayView3<u8>, cfg: &LossConfig) -> Result<LossOutput> {
    match cfg.kind {
        LossKind::Hybrid => hybrid_loss(logits, gt, cfg),
        LossKind::Focal => focal_loss(logits, gt, cfg.focal_gamma, cfg.focal_alpha),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn logits_from(p1: &Array3<f64>) -> Array4<f64> {
        // logits (0, logit(p)) give softmax class-1 probability p
        let (n, h, w) = p1.dim();
        Array4::from_shape_fn((n, 2, h, w), |(b, k, i, j)| {
            if k == 0 {
                0.0
            } else {
                let p = p1[[b, i, j]];
                (p / (1.0 - p)).ln()
            }
        })
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = Array4::from_elem((1, 2, 3, 3), 0.4);
        let gt = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| ((i + j) % 2) as u8);
        let l = weighted_ce(logits.view(), gt.view(), [1.0, 1.0]).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_drive_ce_to_zero() {
        let gt = Array3::from_shape_fn((1, 2, 2), |(_, i, _)| i as u8);
        let logits = Array4::from_shape_fn((1, 2, 2, 2), |(_, k, i, _)| if k == i { 40.0 } else { -40.0 });
        let l = weighted_ce(logits.view(), gt.view(), [1.0, 1.0]).unwrap();
        assert!(l.value >= 0.0 && l.value < 1e-30);
    }

    #[test]
    fn nonbinary_ground_truth_is_domain_error() {
        let logits = Array4::zeros((1, 2, 1, 1));
        let gt = Array3::from_elem((1, 1, 1), 255u8);
        assert!(matches!(weighted_ce(logits.view(), gt.view(), [1.0, 1.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn dice_reference_values() {
        let n = 64.0;
        let p = Array3::from_elem((1, 8, 8), 0.5);
        let ones = Array3::from_elem((1, 8, 8), 1u8);
        let l = dice_loss(logits_from(&p).view(), ones.view(), 1.0).unwrap();
        let expected = 1.0 - (2.0 * 0.5 * n + 1.0) / (n + 0.5 * n + 1.0);
        assert!((l.value - expected).abs() < 1e-12);
        assert!((l.value - 1.0 / 3.0).abs() < 0.01);

        // all-zero ground truth with vanishing probabilities
        let p = Array3::from_elem((1, 8, 8), 1e-12);
        let zeros = Array3::zeros((1, 8, 8));
        let l = dice_loss(logits_from(&p).view(), zeros.view(), 1.0).unwrap();
        assert!(l.value < 1e-9);

        // hard perfect overlap
        let gt = Array3::from_shape_fn((1, 4, 4), |(_, i, j)| u8::from(i < j));
        let logits = Array4::from_shape_fn((1, 2, 4, 4), |(_, k, i, j)| {
            let y = u8::from(i < j) as usize;
            if k == y { 50.0 } else { -50.0 }
        });
        let l = dice_loss(logits.view(), gt.view(), 1.0).unwrap();
        assert!(l.value.abs() < 1e-12);
    }

    #[test]
    fn focal_reference_value() {
        // p_t = 0.5 on a changed pixel, alpha_t = 0.25, gamma = 2
        let logits = Array4::zeros((1, 2, 1, 1));
        let gt = Array3::from_elem((1, 1, 1), 1u8);
        let l = focal_loss(logits.view(), gt.view(), 2.0, 0.25).unwrap();
        let expected = -0.25 * 0.25 * 0.5f64.ln();
        assert!((l.value - expected).abs() < 1e-15);
        assert!((l.value - 0.0433).abs() < 1e-4);
    }

    #[test]
    fn focal_with_zero_gamma_is_alpha_scaled_ce() {
        let logits = Array4::from_shape_fn((1, 2, 3, 3), |(_, k, i, j)| (k as f64 - 0.5) * (i as f64 - j as f64));
        let gt = Array3::from_shape_fn((1, 3, 3), |(_, i, j)| u8::from(i > j));
        let focal = focal_loss(logits.view(), gt.view(), 0.0, 0.5).unwrap();
        let ce = weighted_ce(logits.view(), gt.view(), [0.5, 0.5]).unwrap();
        assert!((focal.value - ce.value).abs() < 1e-14);
    }

    #[test]
    fn hybrid_is_sum_of_parts() {
        let logits = Array4::from_shape_fn((2, 2, 3, 3), |(b, k, i, j)| ((b + k * 3 + i * j) % 5) as f64 - 2.0);
        let gt = Array3::from_shape_fn((2, 3, 3), |(b, i, j)| u8::from((b + i + j) % 3 == 0));
        let cfg = LossConfig { class_weights: [0.3, 0.7], ..LossConfig::default() };
        let h = hybrid_loss(logits.view(), gt.view(), &cfg).unwrap();
        let ce = weighted_ce(logits.view(), gt.view(), cfg.class_weights).unwrap();
        let d = dice_loss(logits.view(), gt.view(), cfg.dice_eps).unwrap();
        assert_eq!(h.value, ce.value + d.value);
        assert_eq!(h.grad, &ce.grad + &d.grad);
    }
}
