//! Randomised structural properties of the tensor ops, fusion blocks and
//! synthetic scenes.

use crossfuse_core::deca::{Deca, DecaConfig};
use crossfuse_core::depa::{Depa, DepaConfig};
use crossfuse_core::focus::decouple_slices;
use crossfuse_core::ops::{self, ConvSpec};
use crossfuse_core::synth::{self, Label, SceneConfig, HIDDEN_CONTRAST};
use crossfuse_core::{ParamStore, SeededRng, Tensor4};
use proptest::prelude::*;

fn max_diff(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmaxes_normalise_and_ignore_offsets(
        seed in any::<u64>(), b in 1usize..4, c in 1usize..9, hw in 1usize..8, offset in -50.0..50.0f64, scale in 0.1..20.0f64,
    ) {
        let mut rng = SeededRng::new(seed);
        let w: Tensor4<f64> = rng.normal_tensor((b, c, 1, 1), scale);
        let y = ops::softmax_channel(&w);
        for i in 0..b {
            prop_assert!((y.sample(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(max_diff(&y, &ops::softmax_channel(&w.map(|v| v + offset))) < 1e-6);

        let w: Tensor4<f64> = rng.normal_tensor((b, 1, hw, hw + 1), scale);
        let y = ops::softmax_spatial(&w);
        for i in 0..b {
            prop_assert!((y.sample(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        prop_assert!(max_diff(&y, &ops::softmax_spatial(&w.map(|v| v + offset))) < 1e-6);
    }

    #[test]
    fn identity_depthwise_conv_is_exact(seed in any::<u64>(), b in 1usize..3, c in 1usize..6, h in 1usize..9, w in 1usize..9) {
        let x: Tensor4<f64> = SeededRng::new(seed).normal_tensor((b, c, h, w), 3.0);
        let k = Tensor4::full((c, 1, 1, 1), 1.0);
        prop_assert!(ops::conv2d(&x, &k, None, ConvSpec::new(1, 0, c)).unwrap().bit_eq(&x));
    }

    #[test]
    fn slices_use_every_pixel_once(b in 1usize..3, c in 1usize..5, h2 in 1usize..6, w2 in 1usize..6) {
        let (h, w) = (2 * h2, 2 * w2);
        let x = Tensor4::from_fn((b, c, h, w), |i, j, y, z| (((i * c + j) * h + y) * w + z) as f64);
        let (g1, g2) = decouple_slices(&x).unwrap();
        prop_assert_eq!(g1.shape().as_array(), [b, 2 * c, h2, w2]);
        let mut seen: Vec<f64> = g1.data().iter().chain(g2.data()).copied().collect();
        seen.sort_by(f64::total_cmp);
        let want: Vec<f64> = (0..b * c * h * w).map(|v| v as f64).collect();
        prop_assert_eq!(seen, want);
    }

    #[test]
    fn deca_shapes_swap_and_zeros(seed in any::<u64>(), b in 1usize..3, c4 in 1usize..3, h in 4usize..10, w in 4usize..10) {
        let c = 4 * c4;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let cfg = DecaConfig { cmwe_layers: 2, se_reduction: 2, ..DecaConfig::default() };
        let deca = Deca::new(&mut store, "d", c, cfg, &mut rng).unwrap();
        let fv: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let fir: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let (v1, ir1, _) = deca.forward(&store, &fv, &fir).unwrap();
        prop_assert_eq!(v1.shape(), fv.shape());
        prop_assert_eq!(ir1.shape(), fir.shape());
        let swapped = deca.swap_sides(&store);
        let (sv, sir, _) = deca.forward(&swapped, &fir, &fv).unwrap();
        prop_assert!(max_diff(&sv, &ir1) < 1e-6 && max_diff(&sir, &v1) < 1e-6);
        let (_, zir, _) = deca.forward(&store, &fv, &Tensor4::zeros(fir.shape())).unwrap();
        prop_assert!(zir.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depa_swap_and_batch_independence(seed in any::<u64>(), b in 2usize..4, c in 1usize..6, h in 3usize..9, w in 3usize..9) {
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::<f64>::new();
        let depa = Depa::new(&mut store, "p", c, DepaConfig::default(), &mut rng).unwrap();
        let fv: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let fir: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let (out, _) = depa.forward(&store, &fv, &fir).unwrap();
        prop_assert_eq!(out.shape(), fv.shape());
        let (sout, _) = depa.forward(&depa.swap_sides(&store), &fir, &fv).unwrap();
        prop_assert!(max_diff(&sout, &out) < 1e-6);
        // rotate the batch by one
        let rot = |t: &Tensor4<f64>| Tensor4::stack(&(0..b).map(|k| t.batch_item((k + 1) % b)).collect::<Vec<_>>()).unwrap();
        let (rout, _) = depa.forward(&store, &rot(&fv), &rot(&fir)).unwrap();
        prop_assert!(rout.bit_eq(&rot(&out)));
    }

    #[test]
    fn generated_boxes_are_small_and_inside(seed in any::<u64>()) {
        let s = synth::gen_scene(&mut SeededRng::new(seed), &SceneConfig::default(), 0);
        for l in &s.labels {
            let b = l.bbox;
            prop_assert!(b.width() > 0.0 && b.width() <= 0.3 + 1e-12);
            prop_assert!(b.height() > 0.0 && b.height() <= 0.3 + 1e-12);
            prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0);
            prop_assert!(l.class < synth::NUM_CLASSES);
        }
    }

    #[test]
    fn hidden_objects_stay_below_the_contrast_bound(seed in any::<u64>()) {
        let cfg = SceneConfig::default();
        let layout = synth::sample_layout(&mut SeededRng::new(seed), &cfg);
        let (vis, ir) = synth::render_clean(&layout, cfg.image_size);
        for k in 0..layout.objects.len() {
            let mut without = layout.clone();
            let obj = without.objects.remove(k);
            let (v0, i0) = synth::render_clean(&without, cfg.image_size);
            let peak = |a: &[Vec<f64>; 3], b: &[Vec<f64>; 3]| {
                a.iter().zip(b).flat_map(|(p, q)| p.iter().zip(q).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
            };
            let (dv, di) = (peak(&vis, &v0), peak(&ir, &i0));
            // the weaker of the two visible-side lower bounds: contrast 0.5, tint 0.75, checker 0.8
            let (hidden, shown) = match obj.class {
                1 => (di, dv),
                2 => (dv, di),
                _ => (0.0, dv.min(di)),
            };
            prop_assert!(hidden <= HIDDEN_CONTRAST + 1e-12, "class {} leaks {}", obj.class, hidden);
            prop_assert!(shown >= 0.3 - 1e-12, "class {} shows only {}", obj.class, shown);
        }
    }

    #[test]
    fn label_lines_round_trip(cx in 0.2..0.8f64, cy in 0.2..0.8f64, w in 0.01..0.3f64, h in 0.01..0.3f64, class in 0usize..3) {
        let l = Label { class, bbox: crossfuse_core::metrics::BBox::from_center(cx, cy, w, h) };
        let back = Label::parse_line(&l.to_line()).unwrap();
        prop_assert_eq!(back.class, class);
        let (a, b) = (back.bbox.center(), l.bbox.center());
        prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        prop_assert!((back.bbox.width() - w).abs() < 1e-12 && (back.bbox.height() - h).abs() < 1e-12);
    }
}
