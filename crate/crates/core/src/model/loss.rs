//! Detection loss over dense predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Real, Tensor4};

use super::targets::{box_iou_grad, Assignment, Grid};

pub const OBJ_WEIGHT: f64 = 1.0;
pub const CLS_WEIGHT: f64 = 0.5;
pub const BOX_WEIGHT: f64 = 2.0;

/// Per-term batch means; `total` is their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub objectness: f64,
    pub classification: f64,
    pub box_iou: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(objectness: f64, classification: f64, box_iou: f64) -> Self {
        Self {
            objectness,
            classification,
            box_iou,
            total: OBJ_WEIGHT * objectness + CLS_WEIGHT * classification + BOX_WEIGHT * box_iou,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("objectness", self.objectness),
            ("classification", self.classification),
            ("box_iou", self.box_iou),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// `-(y ln s(z) + (1-y) ln(1-s(z)))` without overflow.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn grid_of<T: Real>(pred: &Tensor4<T>) -> Grid {
    let s = pred.shape();
    Grid { rows: s.h, cols: s.w }
}

/// Loss and its gradient with respect to every prediction tensor.
///
/// `preds[s]` is `b x (5 + K) x h x w`; `targets[i]` lists the positives of image `i`.
pub fn detection_loss<T: Real>(
    preds: &[Tensor4<T>],
    targets: &[Vec<Assignment>],
    num_classes: usize,
) -> Result<(LossBreakdown, Vec<Tensor4<T>>)> {
    let batch = targets.len();
    for p in preds {
        let s = p.shape();
        if s.b != batch || s.c != 5 + num_classes {
            return Err(Error::InvalidShape {
                op: "detection_loss",
                shape: s,
                reason: format!("expected batch {batch} and {} channels", 5 + num_classes),
            });
        }
    }
    let mut grads: Vec<Tensor4<T>> = preds.iter().map(|p| Tensor4::zeros(p.shape())).collect();
    let (mut obj_sum, mut cls_sum, mut box_sum) = (0.0, 0.0, 0.0);
    let inv_batch = 1.0 / batch.max(1) as f64;

    for (b, positives) in targets.iter().enumerate() {
        let norm = 1.0 / positives.len().max(1) as f64;
        let (mut obj, mut cls, mut bx) = (0.0, 0.0, 0.0);
        // objectness over every cell, negatives first
        for (pred, grad) in preds.iter().zip(grads.iter_mut()) {
            let (src, dst) = (pred.plane(b, 0), grad.plane_mut(b, 0));
            for (z, g) in src.iter().zip(dst.iter_mut()) {
                let z = z.to_f64();
                obj += bce_with_logits(z, 0.0);
                *g = T::from_f64(OBJ_WEIGHT * inv_batch * norm * sigmoid_scalar(z));
            }
        }
        for a in positives {
            let pred = &preds[a.scale];
            let grid = grid_of(pred);
            let grad = &mut grads[a.scale];
            // switch the positive cell's objectness target to 1
            let z = pred.at(b, 0, a.row, a.col).to_f64();
            obj += bce_with_logits(z, 1.0) - bce_with_logits(z, 0.0);
            grad.set(b, 0, a.row, a.col, T::from_f64(OBJ_WEIGHT * inv_batch * norm * (sigmoid_scalar(z) - 1.0)));
            for k in 0..num_classes {
                let z = pred.at(b, 1 + k, a.row, a.col).to_f64();
                let y = if k == a.class { 1.0 } else { 0.0 };
                cls += bce_with_logits(z, y);
                grad.set(b, 1 + k, a.row, a.col, T::from_f64(CLS_WEIGHT * inv_batch * norm * (sigmoid_scalar(z) - y)));
            }
            let raw: [f64; 4] = std::array::from_fn(|k| pred.at(b, 1 + num_classes + k, a.row, a.col).to_f64());
            let (iou, d_iou) = box_iou_grad(raw, grid, a.row, a.col, &a.bbox);
            bx += 1.0 - iou;
            for (k, d) in d_iou.iter().enumerate() {
                grad.set(b, 1 + num_classes + k, a.row, a.col, T::from_f64(-BOX_WEIGHT * inv_batch * norm * d));
            }
        }
        obj_sum += obj * norm;
        cls_sum += cls * norm;
        box_sum += bx * norm;
    }
    let loss = LossBreakdown::from_terms(obj_sum * inv_batch, cls_sum * inv_batch, box_sum * inv_batch);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::BBox;
    use crate::model::targets::encode_box;

    fn empty_preds(b: usize, k: usize, fill: f64) -> Vec<Tensor4<f64>> {
        [16, 8, 4].iter().map(|&n| Tensor4::full((b, 5 + k, n, n), fill)).collect()
    }

    #[test]
    fn confident_background_costs_almost_nothing() {
        let preds = empty_preds(1, 3, -20.0);
        let (loss, _) = detection_loss(&preds, &[vec![]], 3).unwrap();
        // 336 cells of ln(1 + e^-20), by its series
        let x = (-20f64).exp();
        let oracle = 336.0 * (x - x * x / 2.0);
        assert!((loss.objectness / oracle - 1.0).abs() < 1e-12);
        assert!(loss.total < 1e-6);
        assert_eq!((loss.classification, loss.box_iou), (0.0, 0.0));
    }

    #[test]
    fn perfect_box_has_zero_box_term() {
        let mut preds = empty_preds(1, 3, 0.0);
        let gt = BBox::new(0.3, 0.3, 0.4, 0.42);
        let a = Assignment {
            scale: 0,
            row: 5,
            col: 5,
            class: 1,
            bbox: gt,
        };
        let raw = encode_box(&gt, Grid { rows: 16, cols: 16 }, 5, 5).unwrap();
        for (k, r) in raw.iter().enumerate() {
            preds[0].set(0, 4 + k, 5, 5, *r);
        }
        let (loss, _) = detection_loss(&preds, &[vec![a]], 3).unwrap();
        assert!(loss.box_iou.abs() < 1e-12);
        let sum = OBJ_WEIGHT * loss.objectness + CLS_WEIGHT * loss.classification + BOX_WEIGHT * loss.box_iou;
        assert_eq!(loss.total, sum);
    }

    #[test]
    fn bce_is_stable() {
        assert!((bce_with_logits(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logits(1e4, 0.0).is_finite());
        assert!(bce_with_logits(-1e4, 1.0).is_finite());
        assert!(bce_with_logits(-50.0, 0.0) > 0.0);
    }

    #[test]
    fn reports_offending_term() {
        let l = LossBreakdown::from_terms(1.0, f64::NAN, 0.5);
        assert_eq!(l.non_finite_term(), Some("classification"));
        assert_eq!(LossBreakdown::from_terms(1.0, 2.0, 0.5).non_finite_term(), None);
    }
}
