//! Brute-force evaluation for tiny instances, written without reference to the
//! library's matcher or integrator.

#![allow(dead_code)]

use crossfuse_core::metrics::{BBox, Detection, GtBox};
use crossfuse_core::SeededRng;

fn overlap(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let i = w * h;
    i / ((a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - i)
}

/// Every partial injection from detections (in score order) to gts with IoU
/// at least `t`; `None` marks an unmatched detection.
fn all_assignments(dets: &[&Detection], gts: &[&GtBox], t: f64) -> Vec<Vec<Option<usize>>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(
        i: usize,
        dets: &[&Detection],
        gts: &[&GtBox],
        t: f64,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == dets.len() {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(i + 1, dets, gts, t, cur, out);
        cur.pop();
        for g in 0..gts.len() {
            if !cur.contains(&Some(g)) && overlap(&dets[i].bbox, &gts[g].bbox) >= t {
                cur.push(Some(g));
                rec(i + 1, dets, gts, t, cur, out);
                cur.pop();
            }
        }
    }
    rec(0, dets, gts, t, &mut cur, &mut out);
    out
}

/// An assignment is greedy-consistent when every detection, visited in score
/// order, takes the best still-free gt if any qualifies, and stays unmatched
/// otherwise.
fn greedy_consistent(a: &[Option<usize>], dets: &[&Detection], gts: &[&GtBox], t: f64) -> bool {
    for (i, choice) in a.iter().enumerate() {
        let free: Vec<(usize, f64)> = (0..gts.len())
            .filter(|g| !a[..i].contains(&Some(*g)))
            .map(|g| (g, overlap(&dets[i].bbox, &gts[g].bbox)))
            .filter(|&(_, v)| v >= t)
            .collect();
        let best = free.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
        match choice {
            None if !free.is_empty() => return false,
            Some(g) => {
                let v = overlap(&dets[i].bbox, &gts[*g].bbox);
                // the first free gt attaining the maximum
                let first = free.iter().find(|&&(_, w)| w == best).map(|&(k, _)| k);
                if v != best || first != Some(*g) {
                    return false;
                }
            }
            None => {}
        }
    }
    true
}

/// TP flags for `dets` (already in score order), by exhaustive enumeration.
pub fn brute_flags(dets: &[Detection], gts: &[GtBox], t: f64) -> Vec<bool> {
    let mut flags = vec![false; dets.len()];
    let mut groups: Vec<(u64, usize)> = dets.iter().map(|d| (d.image_id, d.class)).collect();
    groups.sort();
    groups.dedup();
    for (image, class) in groups {
        let idx: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].image_id == image && dets[i].class == class)
            .collect();
        let gd: Vec<&Detection> = idx.iter().map(|&i| &dets[i]).collect();
        let gg: Vec<&GtBox> = gts.iter().filter(|g| g.image_id == image && g.class == class).collect();
        let consistent: Vec<_> = all_assignments(&gd, &gg, t)
            .into_iter()
            .filter(|a| greedy_consistent(a, &gd, &gg, t))
            .collect();
        assert_eq!(consistent.len(), 1, "greedy assignment must be unique");
        for (k, &i) in idx.iter().enumerate() {
            flags[i] = consistent[0][k].is_some();
        }
    }
    flags
}

/// Precision envelope sampled at recall 0, 0.01, ..., 1 by scanning every
/// prefix of the ranked list.
pub fn brute_ap(flags: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        points.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let best = points
            .iter()
            .filter(|&&(rec, _)| rec >= level)
            .map(|&(_, p)| p)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

/// (mAP50, mAP50-95) by enumeration.
pub fn brute_map(dets: &[Detection], gts: &[GtBox]) -> (f64, f64) {
    let mut ranked = dets.to_vec();
    // stable: ties keep input order
    ranked.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return (0.0, 0.0);
    }
    let per_threshold: Vec<f64> = (0..10)
        .map(|k| {
            let t = 0.5 + 0.05 * k as f64;
            let sum: f64 = classes
                .iter()
                .map(|&c| {
                    let d: Vec<Detection> = ranked.iter().filter(|x| x.class == c).copied().collect();
                    let g: Vec<GtBox> = gts.iter().filter(|x| x.class == c).copied().collect();
                    brute_ap(&brute_flags(&d, &g, t), g.len())
                })
                .sum();
            sum / classes.len() as f64
        })
        .collect();
    (per_threshold[0], per_threshold.iter().sum::<f64>() / 10.0)
}

fn random_box(rng: &mut SeededRng) -> BBox {
    let (x, y) = (rng.uniform(0.0, 0.7), rng.uniform(0.0, 0.7));
    BBox::new(x, y, x + rng.uniform(0.05, 0.3), y + rng.uniform(0.05, 0.3))
}

/// Up to 5 images with up to 4 gts each; detections are jittered copies of
/// gts, duplicates and random clutter.
pub fn micro_instance(rng: &mut SeededRng) -> (Vec<Detection>, Vec<GtBox>, usize) {
    let n_images = 1 + rng.below(5);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for image_id in 0..n_images as u64 {
        for _ in 0..rng.below(5) {
            let g = GtBox {
                image_id,
                class: rng.below(2),
                bbox: random_box(rng),
            };
            gts.push(g);
            for _ in 0..rng.below(3) {
                let j = 0.04;
                let b = g.bbox;
                let bbox = BBox::new(
                    b.x1 + rng.uniform(-j, j),
                    b.y1 + rng.uniform(-j, j),
                    b.x2 + rng.uniform(-j, j),
                    b.y2 + rng.uniform(-j, j),
                );
                if bbox.is_valid() {
                    let class = if rng.chance(0.9) { g.class } else { 1 - g.class };
                    dets.push(Detection { image_id, class, bbox, score: rng.uniform(0.0, 1.0) });
                }
            }
        }
        for _ in 0..rng.below(3) {
            dets.push(Detection {
                image_id,
                class: rng.below(2),
                bbox: random_box(rng),
                score: rng.uniform(0.0, 1.0),
            });
        }
    }
    (dets, gts, n_images)
}

/// Hand-integrated staircase cases: `(dets, gts, n_images, expected LAMR)`.
pub fn lamr_staircases() -> Vec<(Vec<Detection>, Vec<GtBox>, usize, f64)> {
    let gt = |i: u64, x: f64| GtBox {
        image_id: i,
        class: 0,
        bbox: BBox::new(x, 0.1, x + 0.1, 0.2),
    };
    let hit = |g: &GtBox, score: f64| Detection {
        image_id: g.image_id,
        class: 0,
        bbox: g.bbox,
        score,
    };
    let miss = |i: u64, score: f64| Detection {
        image_id: i,
        class: 0,
        bbox: BBox::new(0.8, 0.8, 0.9, 0.9),
        score,
    };
    let gts: Vec<GtBox> = (0..4).map(|k| gt(k, 0.1 + 0.2 * k as f64)).collect();

    // 8 images, each false positive adds 0.125 FPPI (no reference lands on a
    // step). Sequence TP TP FP TP FP FP FP TP gives steps
    //   fppi 0 -> mr 0.5, fppi 0.125 -> mr 0.25, fppi 0.5 -> mr 0.
    // References 0.01..0.1 see 0.5 (5 points), 0.178 and 0.316 see 0.25,
    // 0.562 and 1.0 see 0 clamped to 1e-10.
    let dets = vec![
        hit(&gts[0], 0.95),
        hit(&gts[1], 0.9),
        miss(5, 0.85),
        hit(&gts[2], 0.8),
        miss(6, 0.7),
        miss(7, 0.6),
        miss(8, 0.5),
        hit(&gts[3], 0.4),
    ];
    let a = 0.5f64.powf(5.0 / 9.0) * 0.25f64.powf(2.0 / 9.0) * 1e-10f64.powf(2.0 / 9.0);

    // 2 images and a leading false positive: the curve starts at FPPI 0.5,
    // so the seven references below it see miss rate 1; the remaining two
    // see 3/4 after one hit.
    let dets_b = vec![miss(0, 0.9), hit(&gts[0], 0.8)];
    let b = 0.75f64.powf(2.0 / 9.0);

    vec![(dets, gts.clone(), 8, a), (dets_b, gts.clone(), 2, b), (Vec::new(), gts, 3, 1.0)]
}
