//! Detection evaluation: IoU, greedy matching, 101-point AP, mAP and
//! log-average miss rate.
//!
//! Conventions:
//! * matching is per image and per class; detections are visited in descending
//!   score order (stable, so equal scores keep input order) and each takes the
//!   unmatched ground truth of highest IoU at or above the threshold;
//! * AP is the mean of the precision envelope sampled at recall `r / 100`,
//!   `r = 0..=100`; classes without ground truth are left out of the mean;
//! * LAMR matches class-agnostically at IoU 0.5 and averages `ln(miss rate)` over
//!   nine FPPI points log-spaced in `[1e-2, 1]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalised `[x1, y1, x2, y2]` form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateBox(self.x1, self.y1, self.x2, self.y2))
        }
    }

    pub fn clamp_unit(&self) -> Self {
        Self::new(
            self.x1.clamp(0.0, 1.0),
            self.y1.clamp(0.0, 1.0),
            self.x2.clamp(0.0, 1.0),
            self.y2.clamp(0.0, 1.0),
        )
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub image_id: u64,
    pub class: usize,
    pub bbox: BBox,
}

/// Detections sorted by descending score; ties keep input order.
pub fn sort_by_score(dets: &[Detection]) -> Vec<Detection> {
    let mut out = dets.to_vec();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// True-positive flag for each detection, in input order. `dets` must already
/// be sorted by descending score.
pub fn match_detections(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> Vec<bool> {
    let mut by_key: HashMap<(u64, usize), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_key.entry((g.image_id, g.class)).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let Some(candidates) = by_key.get(&(d.image_id, d.class)) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for &gi in candidates {
                if taken[gi] {
                    continue;
                }
                let v = iou_unchecked(&d.bbox, &gts[gi].bbox);
                if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub const RECALL_POINTS: usize = 101;

/// Recall sample `r` of the 101-point grid.
#[inline]
pub fn recall_grid(r: usize) -> f64 {
    r as f64 / 100.0
}

/// Precision/recall after each detection in score order.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &hit)| {
            tp += usize::from(hit);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// 101-point interpolated AP, `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(flags, n_gt);
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let recalls: Vec<f64> = curve.iter().map(|&(r, _)| r).collect();
    let total: f64 = (0..RECALL_POINTS)
        .map(|r| {
            let t = recall_grid(r);
            let i = recalls.partition_point(|&x| x < t);
            envelope.get(i).copied().unwrap_or(0.0)
        })
        .sum();
    Some(total / RECALL_POINTS as f64)
}

pub const IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub n_gt: usize,
    pub ap50: f64,
    pub ap50_95: f64,
    /// `(recall, precision)` after each detection at IoU 0.5.
    pub pr_points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub map50_95: f64,
    pub lamr: f64,
    pub per_class: BTreeMap<usize, ClassReport>,
}

/// Per-class AP at every IoU threshold, mean over classes that have ground truth.
pub fn map_metrics(dets: &[Detection], gts: &[GtBox]) -> (f64, f64, BTreeMap<usize, ClassReport>) {
    let sorted = sort_by_score(dets);
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let class_dets: Vec<Detection> = sorted.iter().filter(|d| d.class == class).copied().collect();
        let class_gts: Vec<GtBox> = gts.iter().filter(|g| g.class == class).copied().collect();
        let aps: Vec<f64> = IOU_THRESHOLDS
            .iter()
            .map(|&t| {
                let flags = match_detections(&class_dets, &class_gts, t);
                average_precision(&flags, class_gts.len()).unwrap_or(0.0)
            })
            .collect();
        let flags50 = match_detections(&class_dets, &class_gts, 0.5);
        per_class.insert(
            class,
            ClassReport {
                n_gt: class_gts.len(),
                ap50: aps[0],
                ap50_95: aps.iter().sum::<f64>() / aps.len() as f64,
                pr_points: pr_curve(&flags50, class_gts.len()),
            },
        );
    }
    if per_class.is_empty() {
        return (0.0, 0.0, per_class);
    }
    let n = per_class.len() as f64;
    let map50 = per_class.values().map(|c| c.ap50).sum::<f64>() / n;
    // mean over thresholds of per-threshold mAP equals mean over classes of per-class AP50-95
    let map50_95 = per_class.values().map(|c| c.ap50_95).sum::<f64>() / n;
    (map50, map50_95, per_class)
}

pub const LAMR_FPPI_POINTS: usize = 9;
pub const MISS_RATE_FLOOR: f64 = 1e-10;

/// The nine reference FPPI values `10^(-2 + i/4)`.
pub fn fppi_refs() -> [f64; LAMR_FPPI_POINTS] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / (LAMR_FPPI_POINTS - 1) as f64))
}

/// `(fppi, miss rate)` after each detection in score order, class-agnostic, IoU 0.5.
pub fn miss_rate_curve(dets: &[Detection], gts: &[GtBox], n_images: usize) -> Result<Vec<(f64, f64)>> {
    if n_images == 0 {
        return Err(Error::InvalidArgument("log-average miss rate over zero images".into()));
    }
    let merge_d: Vec<Detection> = sort_by_score(dets)
        .into_iter()
        .map(|d| Detection { class: 0, ..d })
        .collect();
    let merge_g: Vec<GtBox> = gts.iter().map(|g| GtBox { class: 0, ..*g }).collect();
    let flags = match_detections(&merge_d, &merge_g, 0.5);
    let (mut tp, mut fp) = (0usize, 0usize);
    Ok(flags
        .iter()
        .map(|&hit| {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            let miss = if merge_g.is_empty() {
                0.0
            } else {
                1.0 - tp as f64 / merge_g.len() as f64
            };
            (fp as f64 / n_images as f64, miss)
        })
        .collect())
}

/// Log-average miss rate. At each reference FPPI the miss rate of the last
/// operating point with FPPI at or below the reference is used (1.0 if none).
pub fn lamr(dets: &[Detection], gts: &[GtBox], n_images: usize) -> Result<f64> {
    let curve = miss_rate_curve(dets, gts, n_images)?;
    let mean_log = fppi_refs()
        .iter()
        .map(|&r| {
            let i = curve.partition_point(|&(f, _)| f <= r);
            let mr = if i == 0 { 1.0 } else { curve[i - 1].1 };
            mr.max(MISS_RATE_FLOOR).ln()
        })
        .sum::<f64>()
        / LAMR_FPPI_POINTS as f64;
    Ok(mean_log.exp())
}

/// mAP50, mAP50-95, LAMR and per-class breakdown.
pub fn evaluate(dets: &[Detection], gts: &[GtBox], n_images: usize) -> Result<EvalReport> {
    for d in dets {
        d.bbox.validate()?;
    }
    for g in gts {
        g.bbox.validate()?;
    }
    let (map50, map50_95, per_class) = map_metrics(dets, gts);
    Ok(EvalReport {
        map50,
        map50_95,
        lamr: lamr(dets, gts, n_images)?,
        per_class,
    })
}
