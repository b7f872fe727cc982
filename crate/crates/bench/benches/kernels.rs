use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use crossfuse_core::deca::{Deca, DecaConfig};
use crossfuse_core::depa::{Depa, DepaConfig};
use crossfuse_core::metrics::{self, BBox, Detection, GtBox};
use crossfuse_core::model::{Detector, ModelConfig};
use crossfuse_core::ops::{self, ConvSpec};
use crossfuse_core::synth::{self, SceneConfig};
use crossfuse_core::{ParamStore, SeededRng, Tensor4};

fn conv(c: &mut Criterion) {
    let mut rng = SeededRng::new(0);
    let x: Tensor4<f32> = rng.normal_tensor((8, 16, 32, 32), 1.0);
    let k: Tensor4<f32> = rng.normal_tensor((32, 16, 3, 3), 0.1);
    let spec = ConvSpec::same(3);
    c.bench_function("conv2d 8x16x32x32 -> 32, 3x3", |b| {
        b.iter(|| ops::conv2d(black_box(&x), black_box(&k), None, spec).unwrap())
    });
    let y = ops::conv2d(&x, &k, None, spec).unwrap();
    let g: Tensor4<f32> = rng.normal_tensor(y.shape(), 1.0);
    c.bench_function("conv2d backward 8x16x32x32 -> 32, 3x3", |b| {
        b.iter(|| ops::conv2d_backward(black_box(&x), black_box(&k), spec, black_box(&g)).unwrap())
    });
}

fn fusion(c: &mut Criterion) {
    let mut rng = SeededRng::new(1);
    let mut store = ParamStore::<f32>::new();
    let deca = Deca::new(&mut store, "deca", 32, DecaConfig::default(), &mut rng).unwrap();
    let depa = Depa::new(&mut store, "depa", 32, DepaConfig::default(), &mut rng).unwrap();
    let fv: Tensor4<f32> = rng.normal_tensor((8, 32, 16, 16), 1.0);
    let fir: Tensor4<f32> = rng.normal_tensor((8, 32, 16, 16), 1.0);
    c.bench_function("deca forward 8x32x16x16", |b| {
        b.iter(|| deca.forward(&store, black_box(&fv), black_box(&fir)).unwrap())
    });
    c.bench_function("depa forward 8x32x16x16", |b| {
        b.iter(|| depa.forward(&store, black_box(&fv), black_box(&fir)).unwrap())
    });
}

fn detector(c: &mut Criterion) {
    let mut rng = SeededRng::new(2);
    let mut store = ParamStore::<f32>::new();
    let det = Detector::new(&mut store, ModelConfig::default(), &mut rng).unwrap();
    let v: Tensor4<f32> = rng.uniform_tensor((8, 3, 128, 128), 1.0);
    let ir: Tensor4<f32> = rng.uniform_tensor((8, 3, 128, 128), 1.0);
    let mut group = c.benchmark_group("detector");
    group.sample_size(10);
    group.bench_function("forward batch 8 at 128px", |b| {
        b.iter(|| det.predict(&store, black_box(&v), black_box(&ir)).unwrap())
    });
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let mut rng = SeededRng::new(3);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..100u64 {
        for _ in 0..4 {
            let (x, y) = (rng.uniform(0.0, 0.7), rng.uniform(0.0, 0.7));
            let bbox = BBox::new(x, y, x + 0.2, y + 0.2);
            let class = rng.below(3);
            gts.push(GtBox { image_id, class, bbox });
            for _ in 0..5 {
                let j = BBox::new(x + rng.uniform(-0.05, 0.05), y, x + 0.2, y + 0.2 + rng.uniform(-0.05, 0.05));
                dets.push(Detection { image_id, class: rng.below(3), bbox: j, score: rng.uniform(0.0, 1.0) });
            }
        }
    }
    c.bench_function("evaluate 100 images, 2000 detections", |b| {
        b.iter(|| metrics::evaluate(black_box(&dets), black_box(&gts), 100).unwrap())
    });
}

fn synthesis(c: &mut Criterion) {
    let cfg = SceneConfig::default();
    c.bench_function("render one 128px scene pair", |b| {
        b.iter_batched(
            || SeededRng::new(4),
            |mut rng| synth::gen_scene(&mut rng, &cfg, 0),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, conv, fusion, detector, evaluation, synthesis);
criterion_main!(benches);
