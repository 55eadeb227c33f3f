//! Refinement losses evaluated on fixed predictions.
//!
//! Each head set contributes `SL1(iou) + SL1(residual) + BCE(cls)`; an
//! iteration weighs the combined heads by 1 and the voxel-only and point-only
//! heads by [`BRANCH_WEIGHT`]; the total sums over iterations.

use crate::error::{Error, Result};
use crate::geometry::Residual;

/// Weight of the voxel-only and point-only head losses.
pub const BRANCH_WEIGHT: f64 = 0.5;

/// Lower clamp applied inside the BCE logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Mean smooth-L1: `0.5 d^2 / beta` below `beta`, `|d| - 0.5 beta` above.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "smooth-L1 over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < beta {
                0.5 * d * d / beta
            } else {
                d - 0.5 * beta
            }
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean binary cross-entropy; both logarithm arguments are clamped at [`BCE_EPS`].
pub fn bce(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "BCE over {} predictions and {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let mut l = 0.0;
            if y != 0.0 {
                l -= y * p.max(BCE_EPS).ln();
            }
            if y != 1.0 {
                l -= (1.0 - y) * (1.0 - p).max(BCE_EPS).ln();
            }
            l
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Predictions of one head set for every proposal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadPredictions {
    pub iou: Vec<f64>,
    pub residuals: Vec<Residual>,
    pub cls: Vec<f64>,
}

/// Targets for one iteration; `cls[i] == None` leaves proposal `i` out of the BCE term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadTargets {
    pub iou: Vec<f64>,
    pub residuals: Vec<Residual>,
    pub cls: Vec<Option<f64>>,
}

/// Predictions from the combined, voxel-only and point-only features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationPredictions {
    pub combined: Option<HeadPredictions>,
    pub voxel: Option<HeadPredictions>,
    pub point: Option<HeadPredictions>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HeadLoss {
    pub iou: f64,
    pub reg: f64,
    pub cls: f64,
}

impl HeadLoss {
    pub fn sum(&self) -> f64 {
        self.iou + self.reg + self.cls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterationLoss {
    pub combined: HeadLoss,
    pub voxel: HeadLoss,
    pub point: HeadLoss,
}

impl IterationLoss {
    pub fn sum(&self) -> f64 {
        self.combined.sum() + BRANCH_WEIGHT * self.voxel.sum() + BRANCH_WEIGHT * self.point.sum()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub iterations: Vec<IterationLoss>,
}

fn head_loss(p: &HeadPredictions, t: &HeadTargets) -> Result<HeadLoss> {
    let n = t.iou.len();
    if p.iou.len() != n || p.residuals.len() != n || p.cls.len() != n || t.residuals.len() != n || t.cls.len() != n {
        return Err(Error::shape("predictions and targets must cover the same proposals"));
    }
    let flat = |r: &[Residual]| r.iter().flatten().copied().collect::<Vec<f64>>();
    let (mut cp, mut ct) = (Vec::new(), Vec::new());
    for (pred, target) in p.cls.iter().zip(&t.cls) {
        if let Some(y) = target {
            cp.push(*pred);
            ct.push(*y);
        }
    }
    Ok(HeadLoss {
        iou: smooth_l1(&p.iou, &t.iou, 1.0)?,
        reg: smooth_l1(&flat(&p.residuals), &flat(&t.residuals), 1.0)?,
        cls: bce(&cp, &ct)?,
    })
}

/// Sum over iterations of `L_c + 0.5 L_v + 0.5 L_p`.
pub fn total_loss(predictions: &[IterationPredictions], targets: &[HeadTargets]) -> Result<LossBreakdown> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} iterations of predictions for {} of targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut out = LossBreakdown::default();
    for (t, (p, tg)) in predictions.iter().zip(targets).enumerate() {
        let head = |h: &Option<HeadPredictions>, name: &str| {
            h.as_ref()
                .ok_or_else(|| Error::shape(format!("iteration {} lacks {name} predictions", t + 1)))
                .and_then(|h| head_loss(h, tg))
        };
        let it = IterationLoss {
            combined: head(&p.combined, "combined")?,
            voxel: head(&p.voxel, "voxel")?,
            point: head(&p.point, "point")?,
        };
        out.total += it.sum();
        out.iterations.push(it);
    }
    Ok(out)
}
