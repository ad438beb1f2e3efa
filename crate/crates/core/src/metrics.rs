//! Region-overlap evaluation metrics on integer masks.
//!
//! Both metrics are computed per class and averaged over all classes; a
//! class empty in both masks counts as a perfect 1.0.

use crate::data::Mask;
use crate::error::{Error, Result};
use crate::reference::overlap_counts;

fn check_pair(a: &Mask, b: &Mask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "metric",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Mean per-class Dice coefficient 2|A∩B| / (|A|+|B|).
pub fn dice_metric(pred: &Mask, truth: &Mask, n_classes: usize) -> Result<f64> {
    check_pair(pred, truth)?;
    let mut total = 0.0;
    for class in 0..n_classes as u32 {
        let (inter, na, nb) = overlap_counts(pred.data(), truth.data(), class);
        total += if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
    }
    Ok(total / n_classes as f64)
}

/// Mean per-class intersection over union |A∩B| / |A∪B|.
pub fn iou_metric(pred: &Mask, truth: &Mask, n_classes: usize) -> Result<f64> {
    check_pair(pred, truth)?;
    let mut total = 0.0;
    for class in 0..n_classes as u32 {
        let (inter, na, nb) = overlap_counts(pred.data(), truth.data(), class);
        let union = na + nb - inter;
        total += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    }
    Ok(total / n_classes as f64)
}

/// Per-class Dice and IoU for one class, for callers probing the algebraic
/// relation IoU = Dice / (2 − Dice).
pub fn class_overlap(pred: &Mask, truth: &Mask, class: u32) -> Result<(f64, f64)> {
    check_pair(pred, truth)?;
    let (inter, na, nb) = overlap_counts(pred.data(), truth.data(), class);
    let dice = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
    let union = na + nb - inter;
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((dice, iou))
}
