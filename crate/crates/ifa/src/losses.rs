//! Map-level training losses.
//!
//! These are the objective's components as pure functions over prediction
//! and ground-truth maps, for verifying heads and generating reference
//! values. No gradients. All reductions run in f64 with a fixed summation
//! order. The weighted means normalize by the weight sum, so a weight map
//! doubles as a foreground mask or a small-instance emphasis.

use crate::maps::{ClassMap, OffsetField, ScalarMap, SemanticProbMap};
use crate::{Error, Result};

/// Probabilities are floored here before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Relative weights of the loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cent: f64,
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub lambda_shape: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cent: 100.0,
            lambda_inter: 0.01,
            lambda_intra: 0.01,
            lambda_shape: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("lambda_cent", self.lambda_cent),
            ("lambda_inter", self.lambda_inter),
            ("lambda_intra", self.lambda_intra),
            ("lambda_shape", self.lambda_shape),
        ] {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel non-negative weights for the weighted losses.
pub type PixelWeightMap = ScalarMap;

/// The five components, unweighted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub semantic: f64,
    pub center: f64,
    pub inter: f64,
    pub intra: f64,
    pub shape: f64,
}

/// Mean cross entropy of the predicted distributions against per-pixel
/// ground-truth classes.
pub fn semantic_loss(pred: &SemanticProbMap, gt_labels: &ClassMap) -> Result<f64> {
    if pred.height() != gt_labels.height() || pred.width() != gt_labels.width() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{} but labels are {}x{}",
            pred.height(),
            pred.width(),
            gt_labels.height(),
            gt_labels.width()
        )));
    }
    let k = pred.num_classes();
    let mut sum = 0.0f64;
    for (pixel, &class) in gt_labels.data().iter().enumerate() {
        if class as usize >= k {
            return Err(Error::InvalidParameter(format!(
                "ground-truth class {class} outside 0..{k}"
            )));
        }
        let p = (pred.probs_at(pixel)[class as usize] as f64).max(PROB_FLOOR);
        sum -= p.ln();
    }
    Ok(sum / gt_labels.data().len() as f64)
}

/// Weighted mean squared error between two scalar maps. A zero weight sum
/// yields 0.
pub fn center_loss(pred: &ScalarMap, gt: &ScalarMap, w: &PixelWeightMap) -> Result<f64> {
    check_scalar_dims(pred, gt, w)?;
    check_weights(w)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for ((&a, &b), &wt) in pred.data().iter().zip(gt.data()).zip(w.data()) {
        let d = a as f64 - b as f64;
        num += wt as f64 * d * d;
        den += wt as f64;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Weighted mean L1 error between two offset fields, summed over the two
/// components.
pub fn offset_loss(pred: &OffsetField, gt: &OffsetField, w: &PixelWeightMap) -> Result<f64> {
    check_field_dims(pred, gt, w)?;
    check_weights(w)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (pixel, &wt) in w.data().iter().enumerate() {
        let p = &pred.data()[pixel * 2..pixel * 2 + 2];
        let g = &gt.data()[pixel * 2..pixel * 2 + 2];
        let l1 = (p[0] as f64 - g[0] as f64).abs() + (p[1] as f64 - g[1] as f64).abs();
        num += wt as f64 * l1;
        den += wt as f64;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// Weighted mean squared norm of the gap between ground-truth and predicted
/// offset residuals (inter minus intra). Adding the same field to both
/// predicted offsets leaves this unchanged.
pub fn shape_loss(
    pred_intra: &OffsetField,
    pred_inter: &OffsetField,
    gt_intra: &OffsetField,
    gt_inter: &OffsetField,
    w: &PixelWeightMap,
) -> Result<f64> {
    check_field_dims(pred_intra, pred_inter, w)?;
    check_field_dims(gt_intra, gt_inter, w)?;
    check_weights(w)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (pixel, &wt) in w.data().iter().enumerate() {
        let i = pixel * 2;
        let mut norm2 = 0.0f64;
        for c in 0..2 {
            let gt_res = gt_inter.data()[i + c] as f64 - gt_intra.data()[i + c] as f64;
            let pred_res = pred_inter.data()[i + c] as f64 - pred_intra.data()[i + c] as f64;
            let d = gt_res - pred_res;
            norm2 += d * d;
        }
        num += wt as f64 * norm2;
        den += wt as f64;
    }
    Ok(if den > 0.0 { num / den } else { 0.0 })
}

/// The scalar objective: semantic plus the weighted remaining components.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    for (name, value) in [
        ("semantic", components.semantic),
        ("center", components.center),
        ("inter", components.inter),
        ("intra", components.intra),
        ("shape", components.shape),
    ] {
        if !value.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "{name} loss component is not finite: {value}"
            )));
        }
    }
    Ok(components.semantic
        + weights.lambda_cent * components.center
        + weights.lambda_inter * components.inter
        + weights.lambda_intra * components.intra
        + weights.lambda_shape * components.shape)
}

fn check_scalar_dims(pred: &ScalarMap, gt: &ScalarMap, w: &PixelWeightMap) -> Result<()> {
    let dims = |m: &ScalarMap| (m.height(), m.width());
    if dims(pred) != dims(gt) || dims(pred) != dims(w) {
        return Err(Error::DimensionMismatch(format!(
            "prediction {}x{}, ground truth {}x{}, weights {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width(),
            w.height(),
            w.width()
        )));
    }
    Ok(())
}

fn check_field_dims(a: &OffsetField, b: &OffsetField, w: &PixelWeightMap) -> Result<()> {
    if a.height() != b.height()
        || a.width() != b.width()
        || a.height() != w.height()
        || a.width() != w.width()
    {
        return Err(Error::DimensionMismatch(format!(
            "offset fields {}x{} and {}x{} with weights {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width(),
            w.height(),
            w.width()
        )));
    }
    Ok(())
}

fn check_weights(w: &PixelWeightMap) -> Result<()> {
    if w.data().iter().any(|&wt| wt < 0.0) {
        return Err(Error::InvalidParameter(
            "pixel weights must be non-negative".into(),
        ));
    }
    Ok(())
}
