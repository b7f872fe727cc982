//! Ground-truth assignment and box encoding on the prediction grids.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::metrics::BBox;
use crate::ops::{sigmoid_scalar, softplus_scalar};
use crate::synth::Label;

/// Row and column count of one prediction grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Grid {
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) / self.cols as f64, (row as f64 + 0.5) / self.rows as f64)
    }

    /// Stride in pixels for a square `image_size` input.
    pub fn stride(&self, image_size: usize) -> usize {
        image_size / self.cols
    }
}

/// One positive cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Multiple of the stride (in pixels) a box's longer side must reach before a
/// coarser grid takes it.
pub const SCALE_SIZE_FACTOR: f64 = 2.0;

/// Picks the coarsest grid whose stride threshold the box reaches, else the finest.
pub fn scale_for(bbox: &BBox, grids: &[Grid], image_size: usize) -> usize {
    let side = bbox.width().max(bbox.height());
    (0..grids.len())
        .rev()
        .find(|&s| side >= SCALE_SIZE_FACTOR * grids[s].stride(image_size) as f64 / image_size as f64)
        .unwrap_or(0)
}

/// One positive cell per ground truth: the cell holding the box centre at the
/// scale chosen by [`scale_for`]. Smaller boxes claim cells first; a box whose
/// cell is already taken gets no positive.
pub fn assign_targets(gts: &[Label], grids: &[Grid], image_size: usize) -> Result<Vec<Assignment>> {
    for g in gts {
        if !g.bbox.is_valid() {
            let b = g.bbox;
            return Err(Error::DegenerateBox(b.x1, b.y1, b.x2, b.y2));
        }
    }
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[a].bbox.area().total_cmp(&gts[b].bbox.area()));
    let mut taken = HashSet::new();
    let mut out = Vec::with_capacity(gts.len());
    for i in order {
        let g = gts[i];
        let scale = scale_for(&g.bbox, grids, image_size);
        let grid = grids[scale];
        let (cx, cy) = g.bbox.center();
        let col = ((cx * grid.cols as f64).floor() as usize).min(grid.cols - 1);
        let row = ((cy * grid.rows as f64).floor() as usize).min(grid.rows - 1);
        if taken.insert((scale, row, col)) {
            out.push(Assignment {
                scale,
                row,
                col,
                class: g.class,
                bbox: g.bbox,
            });
        }
    }
    Ok(out)
}

fn softplus_inverse(d: f64) -> f64 {
    d + (-(-d).exp_m1()).ln()
}

/// Raw `(l, t, r, b)` logits that decode exactly to `bbox` from the given cell,
/// or `None` when the cell centre lies outside the box.
pub fn encode_box(bbox: &BBox, grid: Grid, row: usize, col: usize) -> Option<[f64; 4]> {
    let (cx, cy) = grid.cell_center(row, col);
    let d = [
        (cx - bbox.x1) * grid.cols as f64,
        (cy - bbox.y1) * grid.rows as f64,
        (bbox.x2 - cx) * grid.cols as f64,
        (bbox.y2 - cy) * grid.rows as f64,
    ];
    if d.iter().any(|&v| v <= 0.0) {
        return None;
    }
    Some(d.map(softplus_inverse))
}

/// Box for raw distance logits at a cell (unclamped).
pub fn decode_box(raw: [f64; 4], grid: Grid, row: usize, col: usize) -> BBox {
    let (cx, cy) = grid.cell_center(row, col);
    let [l, t, r, b] = raw.map(softplus_scalar);
    BBox::new(
        cx - l / grid.cols as f64,
        cy - t / grid.rows as f64,
        cx + r / grid.cols as f64,
        cy + b / grid.rows as f64,
    )
}

/// IoU of the decoded box with `gt`, and its gradient with respect to `raw`.
pub fn box_iou_grad(raw: [f64; 4], grid: Grid, row: usize, col: usize, gt: &BBox) -> (f64, [f64; 4]) {
    let p = decode_box(raw, grid, row, col);
    let iw = p.x2.min(gt.x2) - p.x1.max(gt.x1);
    let ih = p.y2.min(gt.y2) - p.y1.max(gt.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (pw, ph) = (p.width(), p.height());
    let inter = iw * ih;
    let union = pw * ph + gt.area() - inter;
    let iou = inter / union;

    // d/d(x1, y1, x2, y2) of intersection and predicted area
    let d_iw = [if p.x1 > gt.x1 { -1.0 } else { 0.0 }, if p.x2 < gt.x2 { 1.0 } else { 0.0 }];
    let d_ih = [if p.y1 > gt.y1 { -1.0 } else { 0.0 }, if p.y2 < gt.y2 { 1.0 } else { 0.0 }];
    let d_inter = [ih * d_iw[0], iw * d_ih[0], ih * d_iw[1], iw * d_ih[1]];
    let d_area = [-ph, -pw, ph, pw];
    let a = (union + inter) / (union * union);
    let c = inter / (union * union);
    let d_coord: [f64; 4] = std::array::from_fn(|k| d_inter[k] * a - d_area[k] * c);

    let scale = [
        -1.0 / grid.cols as f64,
        -1.0 / grid.rows as f64,
        1.0 / grid.cols as f64,
        1.0 / grid.rows as f64,
    ];
    let grad = std::array::from_fn(|k| d_coord[k] * scale[k] * sigmoid_scalar(raw[k]));
    (iou, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRIDS: [Grid; 3] = [Grid { rows: 16, cols: 16 }, Grid { rows: 8, cols: 8 }, Grid { rows: 4, cols: 4 }];

    fn label(class: usize, cx: f64, cy: f64, w: f64, h: f64) -> Label {
        Label {
            class,
            bbox: BBox::from_center(cx, cy, w, h),
        }
    }

    #[test]
    fn half_image_box_lands_on_coarsest_centre_cell() {
        let a = assign_targets(&[label(0, 0.5, 0.5, 0.5, 0.5)], &GRIDS, 128).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!((a[0].scale, a[0].row, a[0].col), (2, 2, 2));
    }

    #[test]
    fn scale_thresholds_by_enumeration() {
        // thresholds 2 * stride / 128 = 0.125, 0.25, 0.5
        for (side, want) in [(0.05, 0), (0.124, 0), (0.125, 0), (0.2, 0), (0.25, 1), (0.49, 1), (0.5, 2), (0.9, 2)] {
            let b = BBox::from_center(0.5, 0.5, side, side / 2.0);
            assert_eq!(scale_for(&b, &GRIDS, 128), want, "side {side}");
        }
    }

    #[test]
    fn distinct_cells_and_empty_lists() {
        let a = assign_targets(&[label(0, 0.2, 0.2, 0.1, 0.1), label(1, 0.7, 0.7, 0.1, 0.1)], &GRIDS, 128).unwrap();
        assert_eq!(a.len(), 2);
        assert!(assign_targets(&[], &GRIDS, 128).unwrap().is_empty());
    }

    #[test]
    fn shared_cell_goes_to_the_smaller_box() {
        let big = label(0, 0.51, 0.51, 0.12, 0.12);
        let small = label(1, 0.52, 0.52, 0.1, 0.1);
        let a = assign_targets(&[big, small], &GRIDS, 128).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].class, 1);
    }

    #[test]
    fn degenerate_box_rejected() {
        let flat = Label {
            class: 0,
            bbox: BBox::new(0.2, 0.2, 0.4, 0.2),
        };
        assert!(matches!(assign_targets(&[flat], &GRIDS, 128), Err(Error::DegenerateBox(..))));
    }

    #[test]
    fn encode_decode_round_trip() {
        let gt = BBox::new(0.4, 0.42, 0.58, 0.61);
        let grid = GRIDS[0];
        let (row, col) = (8, 7);
        let raw = encode_box(&gt, grid, row, col).unwrap();
        let back = decode_box(raw, grid, row, col);
        for (a, b) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((box_iou_grad(raw, grid, row, col, &gt).0 - 1.0).abs() < 1e-12);
        assert!(encode_box(&gt, grid, 0, 0).is_none());
    }

    #[test]
    fn iou_gradient_matches_differences() {
        let gt = BBox::new(0.3, 0.35, 0.55, 0.5);
        let grid = GRIDS[0];
        let raw = [0.4, -0.2, 1.1, 0.3];
        let (_, grad) = box_iou_grad(raw, grid, 6, 6, &gt);
        for k in 0..4 {
            let mut p = raw;
            let mut m = raw;
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let numeric = (box_iou_grad(p, grid, 6, 6, &gt).0 - box_iou_grad(m, grid, 6, 6, &gt).0) / 2e-6;
            assert!((numeric - grad[k]).abs() < 1e-7, "{k}: {numeric} vs {}", grad[k]);
        }
    }
}
