use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_IGNORE: u32 = 255;

/// Mean pixel cross-entropy over non-ignored labels and its gradient with
/// respect to the logits. With no valid pixels the loss and gradient are 0.
pub fn cross_entropy<F: Scalar>(logits: &Tensor<F>, labels: &[u32], ignore_id: u32) -> Result<(F, Tensor<F>)> {
    let (h, w, k) = logits.hwc()?;
    if labels.len() != h * w {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some((pixel, &label)) = labels
        .iter()
        .enumerate()
        .find(|&(_, &l)| l != ignore_id && l as usize >= k)
    {
        return Err(Error::LabelOutOfRange {
            label: label as i64,
            pixel,
            classes: k,
        });
    }
    let valid = labels.iter().filter(|&&l| l != ignore_id).count();
    let mut grad = logits.zeros_like();
    if valid == 0 {
        return Ok((F::zero(), grad));
    }
    let inv = F::one() / F::of(valid as f64);
    let mut total = 0.0f64;
    for ((row, g), &label) in logits.data().chunks(k).zip(grad.data_mut().chunks_mut(k)).zip(labels) {
        if label == ignore_id {
            continue;
        }
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let z: F = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += (lse - row[label as usize]).as_f64();
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - m).exp() / z * inv;
        }
        g[label as usize] -= inv;
    }
    Ok((F::of(total / valid as f64), grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub miou: f64,
    pub pixel_acc: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

/// Confusion-matrix based mIoU and pixel accuracy over non-ignored pixels.
pub fn metrics(pred: &[u32], gt: &[u32], classes: usize, ignore_id: u32) -> Result<Metrics> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", &[pred.len()], &[gt.len()]));
    }
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fneg = vec![0u64; classes];
    let (mut correct, mut valid) = (0u64, 0u64);
    for (pixel, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if g == ignore_id {
            continue;
        }
        for label in [p, g] {
            if label as usize >= classes {
                return Err(Error::LabelOutOfRange {
                    label: label as i64,
                    pixel,
                    classes,
                });
            }
        }
        valid += 1;
        if p == g {
            correct += 1;
            tp[g as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fneg[g as usize] += 1;
        }
    }
    let per_class_iou: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fneg[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    let pixel_acc = if valid == 0 { 0.0 } else { correct as f64 / valid as f64 };
    Ok(Metrics {
        miou,
        pixel_acc,
        per_class_iou,
    })
}
