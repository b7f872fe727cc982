//! Dense predictions to scored boxes, with class-wise non-maximum suppression.

use crate::metrics::{iou, sort_by_score, BBox, Detection};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Real, Tensor4};

use super::loss::grid_of;
use super::targets::decode_box;

/// Thresholds used by [`decode`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl DecodeConfig {
    /// Low confidence floor so the precision-recall curve is traced out fully.
    pub const EVAL: Self = Self {
        conf_thresh: 0.01,
        nms_iou: 0.5,
        max_detections: 100,
    };
}

/// Greedy per-class suppression: a box is dropped when its IoU with an already
/// kept box of the same class exceeds `nms_iou`. Input order breaks score ties.
pub fn nms(dets: &[Detection], nms_iou: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for d in sort_by_score(dets) {
        let clash = kept
            .iter()
            .filter(|k| k.class == d.class && k.image_id == d.image_id)
            .any(|k| iou(&k.bbox, &d.bbox).map_or(true, |v| v > nms_iou));
        if !clash {
            kept.push(d);
        }
    }
    kept
}

/// Decodes image `b` of the batch. Every class whose score
/// `sigmoid(objectness) * sigmoid(class)` exceeds the threshold yields a box.
pub fn decode_image<T: Real>(preds: &[Tensor4<T>], b: usize, image_id: u64, num_classes: usize, cfg: &DecodeConfig) -> Vec<Detection> {
    let mut raw_dets = Vec::new();
    for pred in preds {
        let grid = grid_of(pred);
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let obj = sigmoid_scalar(pred.at(b, 0, row, col).to_f64());
                if obj <= cfg.conf_thresh {
                    continue;
                }
                let mut bbox: Option<BBox> = None;
                for k in 0..num_classes {
                    let score = obj * sigmoid_scalar(pred.at(b, 1 + k, row, col).to_f64());
                    if score <= cfg.conf_thresh {
                        continue;
                    }
                    let bx = *bbox.get_or_insert_with(|| {
                        let raw = std::array::from_fn(|i| pred.at(b, 1 + num_classes + i, row, col).to_f64());
                        decode_box(raw, grid, row, col).clamp_unit()
                    });
                    if bx.is_valid() {
                        raw_dets.push(Detection {
                            image_id,
                            class: k,
                            bbox: bx,
                            score,
                        });
                    }
                }
            }
        }
    }
    let mut kept = nms(&raw_dets, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Decodes every image of the batch; `image_ids[b]` labels image `b`.
pub fn decode<T: Real>(preds: &[Tensor4<T>], image_ids: &[u64], num_classes: usize, cfg: &DecodeConfig) -> Vec<Vec<Detection>> {
    image_ids
        .iter()
        .enumerate()
        .map(|(b, &id)| decode_image(preds, b, id, num_classes, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::targets::{encode_box, Grid};

    #[test]
    fn confident_background_decodes_to_nothing() {
        let preds: Vec<Tensor4<f32>> = [16, 8, 4].iter().map(|&n| Tensor4::full((2, 8, n, n), -20.0)).collect();
        let cfg = DecodeConfig {
            conf_thresh: 0.25,
            ..DecodeConfig::EVAL
        };
        assert!(decode(&preds, &[0, 1], 3, &cfg).iter().all(|d| d.is_empty()));
    }

    #[test]
    fn duplicate_boxes_suppressed() {
        let bbox = BBox::new(0.1, 0.1, 0.4, 0.4);
        let dets = [
            Detection { image_id: 0, class: 0, bbox, score: 0.8 },
            Detection { image_id: 0, class: 0, bbox, score: 0.9 },
            Detection { image_id: 0, class: 1, bbox, score: 0.7 },
        ];
        let kept = nms(&dets, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(kept[1].class, 1);
    }

    #[test]
    fn encoded_target_decodes_back() {
        let gt = BBox::new(0.55, 0.2, 0.8, 0.41);
        let grid = Grid { rows: 8, cols: 8 };
        let (row, col) = (2, 5);
        let mut p = Tensor4::<f64>::full((1, 8, 8, 8), -20.0);
        p.set(0, 0, row, col, 5.0);
        p.set(0, 2, row, col, 5.0);
        for (k, r) in encode_box(&gt, grid, row, col).unwrap().iter().enumerate() {
            p.set(0, 4 + k, row, col, *r);
        }
        let dets = decode_image(&[p], 0, 7, 3, &DecodeConfig::EVAL);
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        assert_eq!((d.image_id, d.class), (7, 1));
        for (a, b) in [(d.bbox.x1, gt.x1), (d.bbox.y1, gt.y1), (d.bbox.x2, gt.x2), (d.bbox.y2, gt.y2)] {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
