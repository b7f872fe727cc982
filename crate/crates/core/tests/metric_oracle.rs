mod support;

use crossfuse_core::metrics::{self, BBox, Detection, GtBox};
use crossfuse_core::SeededRng;
use proptest::prelude::*;
use support::oracle;

#[test]
fn random_micro_instances_match_enumeration() {
    let mut rng = SeededRng::new(2024);
    for case in 0..200 {
        let (dets, gts, _) = oracle::micro_instance(&mut rng);
        let (m50, m5095, _) = metrics::map_metrics(&dets, &gts);
        let (b50, b5095) = oracle::brute_map(&dets, &gts);
        assert!((m50 - b50).abs() < 1e-9, "case {case}: {m50} vs {b50}");
        assert!((m5095 - b5095).abs() < 1e-9, "case {case}: {m5095} vs {b5095}");
    }
}

#[test]
fn lamr_staircases_match_hand_values() {
    for (dets, gts, n, want) in oracle::lamr_staircases() {
        let got = metrics::lamr(&dets, &gts, n).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn tp_fp_tp_ranking() {
    // recall 0.5 at precision 1, then recall 1 at precision 2/3
    let ap = metrics::average_precision(&[true, false, true], 2).unwrap();
    assert!((ap - oracle::brute_ap(&[true, false, true], 2)).abs() < 1e-12);
    assert!((ap - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
}

#[test]
fn iou_of_offset_squares() {
    let v = metrics::iou(&BBox::new(0.0, 0.0, 2.0, 2.0), &BBox::new(1.0, 1.0, 3.0, 3.0)).unwrap();
    assert!((v - 1.0 / 7.0).abs() < 1e-15);
}

fn instance() -> impl Strategy<Value = (Vec<Detection>, Vec<GtBox>, usize)> {
    any::<u64>().prop_map(|seed| oracle::micro_instance(&mut SeededRng::new(seed)))
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..0.8f64, 0.0..0.8f64, 0.01..0.2f64, 0.01..0.2f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let ab = metrics::iou(&a, &b).unwrap();
        prop_assert_eq!(ab, metrics::iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn map50_dominates_map50_95((dets, gts, _) in instance()) {
        let (m50, m5095, per_class) = metrics::map_metrics(&dets, &gts);
        prop_assert!(m50 >= m5095);
        for c in per_class.values() {
            prop_assert!((0.0..=1.0).contains(&c.ap50));
        }
    }

    #[test]
    fn relabelling_images_changes_nothing((dets, gts, n) in instance(), shift in 1u64..1000) {
        // reverse and shift the ids, keeping the id -> image mapping one to one
        let relabel = |id: u64| (n as u64 - 1 - id) * 7 + shift;
        let d2: Vec<_> = dets.iter().map(|d| Detection { image_id: relabel(d.image_id), ..*d }).collect();
        let g2: Vec<_> = gts.iter().map(|g| GtBox { image_id: relabel(g.image_id), ..*g }).collect();
        let a = metrics::evaluate(&dets, &gts, n).unwrap();
        let b = metrics::evaluate(&d2, &g2, n).unwrap();
        prop_assert_eq!(a.map50, b.map50);
        prop_assert_eq!(a.map50_95, b.map50_95);
        prop_assert_eq!(a.lamr, b.lamr);
    }

    #[test]
    fn ap_monotone_under_appended_outcomes(flags in proptest::collection::vec(any::<bool>(), 0..12), extra in 1usize..4) {
        let n_gt = flags.iter().filter(|&&f| f).count() + extra;
        let base = metrics::average_precision(&flags, n_gt).unwrap();
        let mut with_tp = flags.clone();
        with_tp.push(true);
        let mut with_fp = flags.clone();
        with_fp.push(false);
        prop_assert!(metrics::average_precision(&with_tp, n_gt).unwrap() >= base);
        prop_assert!(metrics::average_precision(&with_fp, n_gt).unwrap() <= base);
    }
}
