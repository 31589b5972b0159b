//! Pixel-level metric suite: pooled-pixel average precision and maximum F1,
//! per-image IoU/Dice at a fixed threshold.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn pooled_pairs(predictions: &[Tensor], truths: &[Tensor]) -> Result<Vec<(f64, bool)>> {
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Argument("need equal, non-empty prediction/truth lists".into()));
    }
    let mut pairs = Vec::new();
    for (p, t) in predictions.iter().zip(truths) {
        if p.shape() != t.shape() {
            return Err(Error::Argument(format!(
                "prediction shape {:?} != truth shape {:?}",
                p.shape(),
                t.shape()
            )));
        }
        for (&score, &gt) in p.data().iter().zip(t.data()) {
            if gt != 0.0 && gt != 1.0 {
                return Err(Error::Argument("ground truth must be binary".into()));
            }
            pairs.push((score, gt == 1.0));
        }
    }
    Ok(pairs)
}

/// Average precision over the pooled pixels of all images, using step
/// interpolation of the precision-recall curve (no trapezoids).
pub fn pixel_ap(predictions: &[Tensor], truths: &[Tensor]) -> Result<f64> {
    let mut pairs = pooled_pairs(predictions, truths)?;
    let total_pos = pairs.iter().filter(|(_, p)| *p).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric("no positive pixels in ground truth".into()));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        // group ties so every pixel at one threshold enters together
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        let prev_recall = tp as f64 / total_pos as f64;
        for k in i..j {
            seen += 1;
            if pairs[k].1 {
                tp += 1;
            }
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        i = j;
    }
    Ok(ap)
}

/// Maximum pooled-pixel F1 over all decision thresholds.
pub fn f1_max(predictions: &[Tensor], truths: &[Tensor]) -> Result<f64> {
    let mut pairs = pooled_pairs(predictions, truths)?;
    let total_pos = pairs.iter().filter(|(_, p)| *p).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric("no positive pixels in ground truth".into()));
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut best: f64 = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        for k in i..j {
            seen += 1;
            if pairs[k].1 {
                tp += 1;
            }
        }
        // threshold = this score: everything seen so far predicted positive
        let f1 = 2.0 * tp as f64 / (seen + total_pos) as f64;
        best = best.max(f1);
        i = j;
    }
    Ok(best)
}

/// Per-image IoU and Dice at threshold `tau` (prediction >= tau is positive),
/// averaged over images. An image with empty truth and empty prediction
/// scores 1 for both.
pub fn miou_mdice(predictions: &[Tensor], truths: &[Tensor], tau: f64) -> Result<(f64, f64)> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::Argument("tau must lie in (0,1)".into()));
    }
    if predictions.is_empty() || predictions.len() != truths.len() {
        return Err(Error::Argument("need equal, non-empty prediction/truth lists".into()));
    }
    let mut iou_sum = 0.0;
    let mut dice_sum = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        if p.shape() != t.shape() {
            return Err(Error::Argument("prediction/truth shape mismatch".into()));
        }
        let mut inter = 0usize;
        let mut pred = 0usize;
        let mut gt = 0usize;
        for (&score, &g) in p.data().iter().zip(t.data()) {
            let pp = score >= tau;
            let gp = g == 1.0;
            if pp {
                pred += 1;
            }
            if gp {
                gt += 1;
            }
            if pp && gp {
                inter += 1;
            }
        }
        let union = pred + gt - inter;
        let (iou, dice) = if union == 0 {
            (1.0, 1.0)
        } else {
            let iou = inter as f64 / union as f64;
            (iou, 2.0 * inter as f64 / (pred + gt) as f64)
        };
        iou_sum += iou;
        dice_sum += dice;
    }
    let n = predictions.len() as f64;
    Ok((iou_sum / n, dice_sum / n))
}
