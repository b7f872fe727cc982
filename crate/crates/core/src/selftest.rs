//! Structural invariant suite: normalisation, partition, shape, symmetry,
//! absorption and modality-isolation properties checked on seeded random data.

use crate::deca::{Deca, DecaConfig};
use crate::depa::{Depa, DepaConfig};
use crate::error::Result;
use crate::focus::decouple_slices;
use crate::metrics::{self, BBox, Detection, GtBox};
use crate::model::{Detector, ModelConfig, Modality};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor4;

pub const NORMALISATION_TOL: f64 = 1e-6;
pub const SYMMETRY_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, worst: f64, tol: f64) -> Check {
    Check {
        name,
        passed: worst <= tol,
        detail: format!("worst {worst:.3e} (tolerance {tol:.0e})"),
    }
}

fn exact(name: &'static str, ok: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed: ok,
        detail: detail.into(),
    }
}

fn max_diff(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(if a.shape() == b.shape() { 0.0 } else { f64::INFINITY }, f64::max)
}

const SHAPES: [(usize, usize, usize, usize); 4] = [(1, 4, 8, 8), (2, 8, 16, 16), (2, 4, 6, 6), (3, 8, 8, 12)];

fn softmax_checks(rng: &mut SeededRng) -> Vec<Check> {
    let (mut sum_c, mut shift_c, mut sum_s, mut shift_s) = (0f64, 0f64, 0f64, 0f64);
    for _ in 0..50 {
        let w: Tensor4<f64> = rng.normal_tensor((3, 7, 1, 1), 4.0);
        let y = ops::softmax_channel(&w);
        for b in 0..3 {
            let s: f64 = y.sample(b).iter().sum();
            sum_c = sum_c.max((s - 1.0).abs());
        }
        shift_c = shift_c.max(max_diff(&y, &ops::softmax_channel(&w.map(|v| v + 5.0))));
        let w: Tensor4<f64> = rng.normal_tensor((2, 1, 5, 9), 4.0);
        let y = ops::softmax_spatial(&w);
        for b in 0..2 {
            let s: f64 = y.sample(b).iter().sum();
            sum_s = sum_s.max((s - 1.0).abs());
        }
        shift_s = shift_s.max(max_diff(&y, &ops::softmax_spatial(&w.map(|v| v - 7.5))));
    }
    vec![
        check("softmax_channel sums to one", sum_c, NORMALISATION_TOL),
        check("softmax_channel shift invariance", shift_c, NORMALISATION_TOL),
        check("softmax_spatial sums to one", sum_s, NORMALISATION_TOL),
        check("softmax_spatial shift invariance", shift_s, NORMALISATION_TOL),
    ]
}

fn conv_identity(rng: &mut SeededRng) -> Check {
    let x: Tensor4<f64> = rng.normal_tensor((2, 5, 7, 7), 1.0);
    let k = Tensor4::full((5, 1, 1, 1), 1.0);
    let ok = ops::conv2d(&x, &k, None, ConvSpec::new(1, 0, 5)).is_ok_and(|y| y.bit_eq(&x));
    exact("identity depthwise 1x1 reproduces input", ok, "bit-exact comparison")
}

fn focus_partition(rng: &mut SeededRng) -> Check {
    let mut ok = true;
    for &(b, c, h, w) in &SHAPES {
        // unique values, so any duplication or omission changes the multiset
        let x = Tensor4::from_fn((b, c, h, w), |i, j, y, z| (((i * c + j) * h + y) * w + z) as f64 + rng.uniform(0.0, 0.5));
        let Ok((g1, g2)) = decouple_slices(&x) else {
            ok = false;
            continue;
        };
        let mut seen: Vec<f64> = g1.data().iter().chain(g2.data()).copied().collect();
        let mut want = x.data().to_vec();
        seen.sort_by(f64::total_cmp);
        want.sort_by(f64::total_cmp);
        ok &= seen == want;
    }
    exact("focus slices partition the input", ok, format!("{} shapes", SHAPES.len()))
}

fn deca_checks(rng: &mut SeededRng) -> Result<Vec<Check>> {
    let (mut shape_ok, mut swap, mut absorb_ok, mut gate_ok, mut determinism_ok) = (true, 0f64, true, true, true);
    for (i, &(b, c, h, w)) in SHAPES.iter().enumerate() {
        let cfg = DecaConfig {
            cmwe_layers: 2,
            se_reduction: 2,
            ..DecaConfig::default()
        };
        let mut store = ParamStore::<f64>::new();
        let deca = Deca::new(&mut store, "deca", c, cfg, &mut rng.fork(i as u64))?;
        let f_v: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let f_ir: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let (v1, ir1, cache) = deca.forward(&store, &f_v, &f_ir)?;
        shape_ok &= v1.shape() == f_v.shape() && ir1.shape() == f_ir.shape();

        let (again_v, again_ir, _) = deca.forward(&store, &f_v, &f_ir)?;
        determinism_ok &= again_v.bit_eq(&v1) && again_ir.bit_eq(&ir1);

        let swapped = deca.swap_sides(&store);
        let (sv, sir, _) = deca.forward(&swapped, &f_ir, &f_v)?;
        swap = swap.max(max_diff(&sv, &ir1)).max(max_diff(&sir, &v1));

        let zero = Tensor4::zeros(f_v.shape());
        let (zv, _, _) = deca.forward(&store, &zero, &f_ir)?;
        absorb_ok &= zv.data().iter().all(|&v| v == 0.0);

        let w = cache.weights().w_en_ir;
        for bb in 0..b {
            let wmax = w.sample(bb).iter().fold(0f64, |m, &v| m.max(v));
            gate_ok &= w.sample(bb).iter().all(|&v| v > 0.0 && v < 1.0);
            gate_ok &= v1.sample(bb).iter().zip(f_v.sample(bb)).all(|(o, i)| o.abs() <= i.abs() * wmax + 1e-15);
        }
    }
    Ok(vec![
        exact("deca preserves shapes", shape_ok, format!("{} shapes", SHAPES.len())),
        check("deca swap equivariance", swap, SYMMETRY_TOL),
        exact("deca zero absorption", absorb_ok, "exact zeros"),
        exact("deca channel gate bounds magnitudes", gate_ok, "weights in (0, 1)"),
        exact("deca deterministic", determinism_ok, "bit-identical reruns"),
    ])
}

fn depa_checks(rng: &mut SeededRng) -> Result<Vec<Check>> {
    let (mut shape_ok, mut swap, mut absorb_ok, mut norm, mut perm) = (true, 0f64, true, 0f64, 0f64);
    for (i, &(b, c, h, w)) in SHAPES.iter().enumerate() {
        let mut store = ParamStore::<f64>::new();
        let depa = Depa::new(&mut store, "depa", c, DepaConfig::default(), &mut rng.fork(100 + i as u64))?;
        let f_v: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let f_ir: Tensor4<f64> = rng.normal_tensor((b, c, h, w), 1.0);
        let (out, cache) = depa.forward(&store, &f_v, &f_ir)?;
        shape_ok &= out.shape() == f_v.shape();
        for bb in 0..b {
            let s: f64 = cache.soft_mix().sample(bb).iter().sum();
            norm = norm.max((s - 1.0).abs());
        }

        let swapped = depa.swap_sides(&store);
        let (sout, _) = depa.forward(&swapped, &f_ir, &f_v)?;
        swap = swap.max(max_diff(&sout, &out));

        let zero = Tensor4::zeros(f_v.shape());
        let (z, _) = depa.forward(&store, &zero, &zero)?;
        absorb_ok &= z.data().iter().all(|&v| v == 0.0);

        // reverse the batch order of both inputs
        let rev = |t: &Tensor4<f64>| {
            let items: Vec<_> = (0..b).rev().map(|k| t.batch_item(k)).collect();
            Tensor4::stack(&items).expect("same shapes")
        };
        let (pout, _) = depa.forward(&store, &rev(&f_v), &rev(&f_ir))?;
        perm = perm.max(max_diff(&pout, &rev(&out)));
    }
    Ok(vec![
        exact("depa preserves shapes", shape_ok, format!("{} shapes", SHAPES.len())),
        check("depa spatial softmax sums to one", norm, NORMALISATION_TOL),
        check("depa swap symmetry", swap, SYMMETRY_TOL),
        exact("depa zero absorption", absorb_ok, "exact zeros"),
        check("depa batch permutation", perm, 0.0),
    ])
}

fn nan_guard(rng: &mut SeededRng) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (modality, name) in [
        (Modality::Visible, "visible model ignores infrared input"),
        (Modality::Infrared, "infrared model ignores visible input"),
    ] {
        let cfg = ModelConfig {
            width: 8,
            modality,
            ..ModelConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let det = Detector::new(&mut store, cfg, &mut rng.fork(7))?;
        let real: Tensor4<f32> = rng.uniform_tensor((2, 3, cfg.image_size, cfg.image_size), 1.0);
        let other: Tensor4<f32> = rng.uniform_tensor(real.shape(), 1.0);
        let nan = Tensor4::full(real.shape(), f32::NAN);
        let (a, b) = match modality {
            Modality::Visible => (det.predict(&store, &real, &nan)?, det.predict(&store, &real, &other)?),
            _ => (det.predict(&store, &nan, &real)?, det.predict(&store, &other, &real)?),
        };
        let ok = a.iter().zip(&b).all(|(x, y)| x.all_finite() && x.bit_eq(y));
        out.push(exact(name, ok, "NaN-filled other stream"));
    }
    Ok(out)
}

fn metric_checks(rng: &mut SeededRng) -> Result<Vec<Check>> {
    let rand_box = |rng: &mut SeededRng| {
        let (x, y) = (rng.uniform(0.0, 0.8), rng.uniform(0.0, 0.8));
        BBox::new(x, y, x + rng.uniform(0.02, 0.2), y + rng.uniform(0.02, 0.2))
    };
    let (mut sym_ok, mut order_ok) = (true, true);
    for _ in 0..200 {
        let (a, b) = (rand_box(rng), rand_box(rng));
        sym_ok &= metrics::iou(&a, &b)? == metrics::iou(&b, &a)?;
        let n_images = 1 + rng.below(4);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for image_id in 0..n_images as u64 {
            for _ in 0..rng.below(4) {
                let bbox = rand_box(rng);
                let class = rng.below(2);
                gts.push(GtBox { image_id, class, bbox });
                if rng.chance(0.7) {
                    let j = BBox::new(bbox.x1 + rng.uniform(-0.02, 0.02), bbox.y1, bbox.x2, bbox.y2 + rng.uniform(-0.02, 0.02));
                    if j.is_valid() {
                        dets.push(Detection { image_id, class, bbox: j, score: rng.uniform(0.0, 1.0) });
                    }
                }
            }
            for _ in 0..rng.below(3) {
                dets.push(Detection { image_id, class: rng.below(2), bbox: rand_box(rng), score: rng.uniform(0.0, 1.0) });
            }
        }
        let (m50, m5095, _) = metrics::map_metrics(&dets, &gts);
        order_ok &= m50 >= m5095;
    }
    Ok(vec![
        exact("iou symmetric", sym_ok, "200 random pairs, exact"),
        exact("mAP50 >= mAP50-95", order_ok, "200 random instances"),
    ])
}

/// Runs every invariant check.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut rng = SeededRng::new(seed);
    let mut out = softmax_checks(&mut rng);
    out.push(conv_identity(&mut rng));
    out.push(focus_partition(&mut rng));
    out.extend(deca_checks(&mut rng)?);
    out.extend(depa_checks(&mut rng)?);
    out.extend(nan_guard(&mut rng)?);
    out.extend(metric_checks(&mut rng)?);
    Ok(out)
}
