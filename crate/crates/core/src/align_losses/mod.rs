//! Detection loss and the two cross-view alignment losses.
//!
//! * `L_det`: negative log-likelihood over the (K+1)-way class distribution
//!   plus smooth-L1 over foreground box offsets, averaged over the sampled
//!   proposals.
//! * `L_cal`: mean over shared proposals of `KL(p_clean || p_corrupted)`.
//! * `L_ral`: mean over shared proposals of the squared L2 distance between
//!   decoded boxes, after scaling coordinates by the image size.
//! * `L_tot = L_det + alpha * L_cal + beta * L_ral`.
//!
//! Every loss has a companion `*_grad` returning analytic gradients.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied inside logarithms.
pub const LOG_FLOOR: f64 = 1e-7;
/// Row-sum tolerance for probability rows.
pub const DIST_TOL: f64 = 1e-5;
/// Smooth-L1 transition point for box-head offsets.
pub const HEAD_SMOOTH_L1_BETA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_cal: f64,
    pub l_ral: f64,
    pub l_tot: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn total_loss(l_det: f64, l_cal: f64, l_ral: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    for w in [alpha, beta] {
        if w < 0.0 || w.is_nan() {
            return Err(Error::NegativeWeight(w));
        }
    }
    Ok(LossBreakdown { l_det, l_cal, l_ral, l_tot: l_det + alpha * l_cal + beta * l_ral, alpha, beta })
}

fn check_same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn check_distributions(p: ArrayView2<f64>) -> Result<()> {
    for (row, r) in p.rows().into_iter().enumerate() {
        let sum: f64 = r.sum();
        if (sum - 1.0).abs() > DIST_TOL || r.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::NotADistribution { row, sum });
        }
    }
    Ok(())
}

#[inline]
fn flog(v: f64) -> f64 {
    v.max(LOG_FLOOR).ln()
}

/// Mean over rows of `KL(p_s[n] || p_phi[n])`. Zero rows give zero.
pub fn classification_alignment(p_s: ArrayView2<f64>, p_phi: ArrayView2<f64>) -> Result<f64> {
    Ok(classification_alignment_grad(p_s, p_phi)?.0)
}

/// KL value together with its gradients with respect to both arguments.
pub fn classification_alignment_grad(
    p_s: ArrayView2<f64>,
    p_phi: ArrayView2<f64>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_same_shape(p_s, p_phi, "classification alignment")?;
    check_distributions(p_s)?;
    check_distributions(p_phi)?;
    Ok(classification_alignment_unchecked(p_s, p_phi))
}

/// Same as [`classification_alignment_grad`] without shape or row-sum
/// validation, so it can be probed at points off the simplex.
pub fn classification_alignment_unchecked(
    p_s: ArrayView2<f64>,
    p_phi: ArrayView2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let (z, k) = p_s.dim();
    let mut g_s = Array2::zeros((z, k));
    let mut g_phi = Array2::zeros((z, k));
    if z == 0 {
        return (0.0, g_s, g_phi);
    }
    let inv = 1.0 / z as f64;
    let mut total = 0.0;
    for n in 0..z {
        for c in 0..k {
            let (p, q) = (p_s[[n, c]], p_phi[[n, c]]);
            let diff = flog(p) - flog(q);
            total += p * diff;
            // d/dp [p ln max(p, eps)] is ln p + 1 above the floor.
            let dp_self = if p > LOG_FLOOR { 1.0 } else { 0.0 };
            g_s[[n, c]] = (diff + dp_self) * inv;
            g_phi[[n, c]] = if q > LOG_FLOOR { -p / q * inv } else { 0.0 };
        }
    }
    (total * inv, g_s, g_phi)
}

fn check_boxes(b: ArrayView2<f64>) -> Result<()> {
    if b.ncols() != 4 {
        return Err(Error::ShapeMismatch(format!("boxes must be Zx4, got {:?}", b.dim())));
    }
    Ok(())
}

/// Mean over rows of the squared L2 distance between boxes scaled into
/// `[0, 1]` by `(width, height)`.
pub fn localization_alignment(b_s: ArrayView2<f64>, b_phi: ArrayView2<f64>, image_size: (f64, f64)) -> Result<f64> {
    Ok(localization_alignment_grad(b_s, b_phi, image_size)?.0)
}

/// Value and gradients with respect to the absolute (unscaled) boxes.
pub fn localization_alignment_grad(
    b_s: ArrayView2<f64>,
    b_phi: ArrayView2<f64>,
    image_size: (f64, f64),
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    check_boxes(b_s)?;
    check_boxes(b_phi)?;
    check_same_shape(b_s, b_phi, "localization alignment")?;
    let z = b_s.nrows();
    let mut g_s = Array2::zeros((z, 4));
    let mut g_phi = Array2::zeros((z, 4));
    if z == 0 {
        return Ok((0.0, g_s, g_phi));
    }
    let (w, h) = image_size;
    let scale = [1.0 / w, 1.0 / h, 1.0 / w, 1.0 / h];
    let inv = 1.0 / z as f64;
    let mut total = 0.0;
    for n in 0..z {
        for j in 0..4 {
            let d = (b_s[[n, j]] - b_phi[[n, j]]) * scale[j];
            total += d * d;
            let g = 2.0 * d * scale[j] * inv;
            g_s[[n, j]] = g;
            g_phi[[n, j]] = -g;
        }
    }
    Ok((total * inv, g_s, g_phi))
}

/// Supervision for one sampled proposal. `class == 0` is background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposalTarget {
    pub row: usize,
    pub class: usize,
    /// Encoded regression target; present for foreground proposals only.
    pub box_target: Option<[f64; 4]>,
}

#[inline]
pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    let a = x.abs();
    if a < beta {
        0.5 * a * a / beta
    } else {
        a - 0.5 * beta
    }
}

#[inline]
pub fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

#[derive(Debug, Clone)]
pub struct DetectionLossGrad {
    pub value: f64,
    pub class_term: f64,
    pub box_term: f64,
    /// Gradient with respect to the softmax logits behind `probs`.
    pub d_logits: Array2<f64>,
    pub d_deltas: Array2<f64>,
}

fn smoothed_target(class: usize, k: usize, label_smoothing: f64) -> impl Fn(usize) -> f64 {
    move |c| {
        let one_hot = if c == class { 1.0 } else { 0.0 };
        (1.0 - label_smoothing) * one_hot + label_smoothing / k as f64
    }
}

pub fn detection_loss(
    probs: ArrayView2<f64>,
    deltas: ArrayView2<f64>,
    targets: &[ProposalTarget],
    label_smoothing: f64,
    beta: f64,
) -> Result<f64> {
    Ok(detection_loss_grad(probs, deltas, targets, label_smoothing, beta)?.value)
}

pub fn detection_loss_grad(
    probs: ArrayView2<f64>,
    deltas: ArrayView2<f64>,
    targets: &[ProposalTarget],
    label_smoothing: f64,
    beta: f64,
) -> Result<DetectionLossGrad> {
    if targets.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_boxes(deltas)?;
    if probs.nrows() != deltas.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows vs {} delta rows",
            probs.nrows(),
            deltas.nrows()
        )));
    }
    let (z, k) = probs.dim();
    let mut d_logits = Array2::zeros((z, k));
    let mut d_deltas = Array2::zeros((z, 4));
    let inv = 1.0 / targets.len() as f64;
    let (mut cls, mut reg) = (0.0, 0.0);
    for t in targets {
        if t.row >= z || t.class >= k {
            return Err(Error::ShapeMismatch(format!("target {t:?} outside {z}x{k}")));
        }
        let y = smoothed_target(t.class, k, label_smoothing);
        for c in 0..k {
            let yc = y(c);
            if yc > 0.0 {
                cls -= yc * flog(probs[[t.row, c]]);
            }
            d_logits[[t.row, c]] += (probs[[t.row, c]] - yc) * inv;
        }
        if let (Some(bt), true) = (t.box_target, t.class > 0) {
            for j in 0..4 {
                let x = deltas[[t.row, j]] - bt[j];
                reg += smooth_l1(x, beta);
                d_deltas[[t.row, j]] += smooth_l1_grad(x, beta) * inv;
            }
        }
    }
    Ok(DetectionLossGrad {
        value: (cls + reg) * inv,
        class_term: cls * inv,
        box_term: reg * inv,
        d_logits,
        d_deltas,
    })
}

#[cfg(test)]
mod tests;
