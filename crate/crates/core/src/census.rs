//! Every differentiable operation in the crate, wrapped for [`vjp_check`] with
//! seeded double-precision inputs and parameters.
//!
//! [`vjp_check`]: crate::gradcheck::vjp_check

use crate::deca::{CmweKind, Cmwe, Cwe, Deca, DecaConfig, MixChannels};
use crate::depa::{Depa, DepaConfig, DepaMix, PixelWeights};
use crate::error::Result;
use crate::focus::{self, BidirFocus, FocusConfig};
use crate::gradcheck::{vjp_check_report, Coverage, DifferentiableOp, ScaledVjp, Vjp, VjpReport};
use crate::layers::GroupNorm;
use crate::model::backbone::{Backbone, ConvBlock};
use crate::model::head::ScaleHead;
use crate::model::loss::detection_loss;
use crate::model::targets::assign_targets;
use crate::model::{Detector, ModelConfig, Modality};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::synth::{gen_scene, SceneConfig};
use crate::tensor::{concat_channels, split_channels, Shape4, Tensor4};

type T64 = Tensor4<f64>;
type ForwardFn = dyn Fn(&ParamStore<f64>, &[T64]) -> Result<Vec<T64>> + Send + Sync;
type VjpFn = dyn Fn(&ParamStore<f64>, &[T64], &[T64]) -> Result<Vjp> + Send + Sync;

/// A differentiable operation given by a pair of closures.
pub struct FnOp {
    name: String,
    forward: Box<ForwardFn>,
    vjp: Box<VjpFn>,
}

impl FnOp {
    pub fn new(
        name: impl Into<String>,
        forward: impl Fn(&ParamStore<f64>, &[T64]) -> Result<Vec<T64>> + Send + Sync + 'static,
        vjp: impl Fn(&ParamStore<f64>, &[T64], &[T64]) -> Result<Vjp> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            forward: Box::new(forward),
            vjp: Box::new(vjp),
        }
    }
}

impl DifferentiableOp for FnOp {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, params: &ParamStore<f64>, inputs: &[T64]) -> Result<Vec<T64>> {
        (self.forward)(params, inputs)
    }

    fn vjp(&self, params: &ParamStore<f64>, inputs: &[T64], cotangents: &[T64]) -> Result<Vjp> {
        (self.vjp)(params, inputs, cotangents)
    }
}

/// One entry of the census: an op with the point it is checked at.
pub struct Case {
    pub op: Box<dyn DifferentiableOp + Send + Sync>,
    pub params: ParamStore<f64>,
    pub inputs: Vec<T64>,
    pub coverage: Coverage,
}

impl Case {
    pub fn name(&self) -> String {
        self.op.name()
    }

    pub fn check(&self, eps: f64) -> Result<VjpReport> {
        vjp_check_report(self.op.as_ref(), &self.params, &self.inputs, eps, self.coverage)
    }
}

/// Shapes of the per-op checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CensusShape {
    pub b: usize,
    pub c: usize,
    pub hw: usize,
}

impl Default for CensusShape {
    fn default() -> Self {
        Self { b: 2, c: 4, hw: 6 }
    }
}

fn no_params(inputs: Vec<T64>) -> Vjp {
    Vjp {
        inputs,
        params: ParamStore::<f64>::new().grad_buffer(),
    }
}

fn unary(
    name: &str,
    f: impl Fn(&T64) -> T64 + Send + Sync + 'static,
    b: impl Fn(&T64, &T64, &T64) -> T64 + Send + Sync + 'static,
) -> FnOp {
    let f = std::sync::Arc::new(f);
    let f2 = f.clone();
    FnOp::new(
        name,
        move |_, x| Ok(vec![f(&x[0])]),
        move |_, x, g| {
            let y = f2(&x[0]);
            Ok(no_params(vec![b(&x[0], &y, &g[0])]))
        },
    )
}

fn case(op: FnOp, params: ParamStore<f64>, inputs: Vec<T64>) -> Case {
    Case {
        op: Box::new(op),
        params,
        inputs,
        coverage: Coverage::All,
    }
}

fn conv_case(name: &str, s: CensusShape, c_out: usize, k: usize, spec: ConvSpec, rng: &mut SeededRng) -> Case {
    let mut params = ParamStore::new();
    params
        .add("bias", rng.normal_tensor((1, c_out, 1, 1), 1.0))
        .expect("fresh store");
    let x = rng.normal_tensor((s.b, s.c, s.hw, s.hw), 1.0);
    let kernel = rng.normal_tensor((c_out, s.c / spec.groups, k, k), 0.5);
    let op = FnOp::new(
        name,
        move |p, x| {
            let bias = p.value(p.find("bias").unwrap()).data();
            Ok(vec![ops::conv2d(&x[0], &x[1], Some(bias), spec)?])
        },
        move |p, x, g| {
            let cg = ops::conv2d_backward(&x[0], &x[1], spec, &g[0])?;
            let mut grads = p.grad_buffer();
            grads.add_to(p.find("bias").unwrap(), &cg.bias);
            Ok(Vjp {
                inputs: vec![cg.input, cg.kernel],
                params: grads,
            })
        },
    );
    case(op, params, vec![x, kernel])
}

fn small_deca_config(kind: CmweKind) -> DecaConfig {
    DecaConfig {
        cmwe_layers: 2,
        cmwe_kind: kind,
        se_reduction: 2,
    }
}

/// Builds the census. With `corrupt`, every VJP is scaled by 1.01 so the
/// checks must fail.
pub fn census(shape: CensusShape, seed: u64, corrupt: bool) -> Result<Vec<Case>> {
    let s = shape;
    let mut rng = SeededRng::new(seed);
    let feat = |rng: &mut SeededRng| -> T64 { rng.normal_tensor((s.b, s.c, s.hw, s.hw), 1.0) };
    let mut cases = Vec::new();

    cases.push(conv_case("conv2d 3x3", s, 2 * s.c, 3, ConvSpec::same(3), &mut rng));
    cases.push(conv_case("conv2d 3x3 stride 2", s, s.c, 3, ConvSpec::new(2, 1, 1), &mut rng));
    cases.push(conv_case("conv2d depthwise", s, s.c, 3, ConvSpec::same(3).with_groups(s.c), &mut rng));
    cases.push(conv_case("conv2d 1x1", s, 3, 1, ConvSpec::new(1, 0, 1), &mut rng));

    let x = rng.normal_tensor((s.b, s.c, 1, 1), 1.0);
    cases.push(case(
        unary("softmax_channel", ops::softmax_channel, |_, y, g| ops::softmax_channel_backward(y, g)),
        ParamStore::new(),
        vec![x],
    ));
    let x = rng.normal_tensor((s.b, 1, s.hw, s.hw), 1.0);
    cases.push(case(
        unary("softmax_spatial", ops::softmax_spatial, |_, y, g| ops::softmax_spatial_backward(y, g)),
        ParamStore::new(),
        vec![x],
    ));
    cases.push(case(
        unary("global_avg_pool", ops::global_avg_pool, |x, _, g| {
            ops::global_avg_pool_backward(x.shape(), g)
        }),
        ParamStore::new(),
        vec![feat(&mut rng)],
    ));
    cases.push(case(
        unary("avg_pool2x2", |x| ops::avg_pool2x2(x).expect("even dims"), |x, _, g| {
            ops::avg_pool2x2_backward(x.shape(), g)
        }),
        ParamStore::new(),
        vec![feat(&mut rng)],
    ));
    cases.push(case(
        unary("sigmoid", ops::sigmoid, |_, y, g| ops::sigmoid_backward(y, g)),
        ParamStore::new(),
        vec![feat(&mut rng)],
    ));
    cases.push(case(
        unary("relu", ops::relu, |x, _, g| ops::relu_backward(x, g)),
        ParamStore::new(),
        vec![feat(&mut rng)],
    ));
    cases.push(case(
        unary("silu", ops::silu, |x, _, g| ops::silu_backward(x, g)),
        ParamStore::new(),
        vec![feat(&mut rng)],
    ));
    cases.push(case(
        unary("softplus", ops::softplus, |x, _, g| ops::softplus_backward(x, g)),
        ParamStore::new(),
        vec![feat(&mut rng)],
    ));

    let binary = |name: &str, w_shape: Shape4, rng: &mut SeededRng, kind: u8| -> Case {
        let fwd = move |a: &T64, b: &T64| match kind {
            0 => ops::mul_channel(a, b),
            1 => ops::mul_spatial(a, b),
            _ => ops::mul(a, b),
        };
        let bwd = move |a: &T64, b: &T64, g: &T64| match kind {
            0 => ops::mul_channel_backward(a, b, g),
            1 => ops::mul_spatial_backward(a, b, g),
            _ => ops::mul_backward(a, b, g),
        };
        let op = FnOp::new(
            name,
            move |_, x| Ok(vec![fwd(&x[0], &x[1])?]),
            move |_, x, g| {
                let (ga, gb) = bwd(&x[0], &x[1], &g[0]);
                Ok(no_params(vec![ga, gb]))
            },
        );
        let f = rng.normal_tensor((s.b, s.c, s.hw, s.hw), 1.0);
        let w = rng.normal_tensor(w_shape, 1.0);
        case(op, ParamStore::new(), vec![f, w])
    };
    cases.push(binary("mul_channel", Shape4::new(s.b, s.c, 1, 1), &mut rng, 0));
    cases.push(binary("mul_spatial", Shape4::new(s.b, 1, s.hw, s.hw), &mut rng, 1));
    cases.push(binary("mul", Shape4::new(s.b, s.c, s.hw, s.hw), &mut rng, 2));

    let concat = FnOp::new(
        "concat_channels",
        |_, x| Ok(vec![concat_channels(&[&x[0], &x[1]])?]),
        |_, x, g| {
            let widths = [x[0].shape().c, x[1].shape().c];
            Ok(no_params(split_channels(&g[0], &widths)?))
        },
    );
    cases.push(case(concat, ParamStore::new(), vec![feat(&mut rng), feat(&mut rng)]));

    {
        let mut params = ParamStore::new();
        let gn = GroupNorm::new(&mut params, "gn", s.c, 2, 1e-5)?;
        for id in [gn.gamma, gn.beta] {
            let shape = params.value(id).shape();
            *params.value_mut(id) = rng.normal_tensor(shape, 1.0);
        }
        let gn2 = gn.clone();
        let op = FnOp::new(
            "group_norm",
            move |p, x| Ok(vec![gn.forward(p, &x[0])?.0]),
            move |p, x, g| {
                let (_, cache) = gn2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let gx = gn2.backward(p, &cache, &g[0], &mut grads);
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng)]));
    }

    let slices = FnOp::new(
        "decouple_slices",
        |_, x| {
            let (a, b) = focus::decouple_slices(&x[0])?;
            Ok(vec![a, b])
        },
        |_, x, g| Ok(no_params(vec![focus::decouple_slices_backward(x[0].shape(), &g[0], &g[1])])),
    );
    cases.push(case(slices, ParamStore::new(), vec![feat(&mut rng)]));

    // channel fusion and its parts
    {
        let mut params = ParamStore::new();
        let m = MixChannels::new(&mut params, "mix", s.c, &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "mix_channels",
            move |p, x| Ok(vec![m.forward(p, &x[0], &x[1])?.0]),
            move |p, x, g| {
                let (_, cat) = m2.forward(p, &x[0], &x[1])?;
                let mut grads = p.grad_buffer();
                let (a, b) = m2.backward(p, &cat, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![a, b], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng), feat(&mut rng)]));
    }
    for kind in [CmweKind::Depthwise, CmweKind::Standard] {
        let mut params = ParamStore::new();
        let m = Cmwe::new(&mut params, "cmwe", s.c, &small_deca_config(kind), &mut rng)?;
        let m2 = m.clone();
        let name = match kind {
            CmweKind::Depthwise => "cmwe depthwise",
            CmweKind::Standard => "cmwe standard",
        };
        let op = FnOp::new(
            name,
            move |p, x| Ok(vec![m.forward(p, &x[0])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let gx = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng)]));
    }
    {
        let mut params = ParamStore::new();
        let m = Cwe::new(&mut params, "cwe", s.c, 2, &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "cwe",
            move |p, x| Ok(vec![m.forward(p, &x[0])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let gx = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng)]));
    }
    {
        let mut params = ParamStore::new();
        let m = Deca::new(&mut params, "deca", s.c, small_deca_config(CmweKind::Depthwise), &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "deca",
            move |p, x| {
                let (v1, ir1, _) = m.forward(p, &x[0], &x[1])?;
                Ok(vec![v1, ir1])
            },
            move |p, x, g| {
                let (_, _, cache) = m2.forward(p, &x[0], &x[1])?;
                let mut grads = p.grad_buffer();
                let (a, b) = m2.backward(p, &cache, &g[0], &g[1], &mut grads)?;
                Ok(Vjp { inputs: vec![a, b], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng), feat(&mut rng)]));
    }

    // pixel fusion and its parts
    {
        let mut params = ParamStore::new();
        let m = DepaMix::new(&mut params, "depa_mix", s.c, &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "depa_mix",
            move |p, x| Ok(vec![m.forward(p, &x[0], &x[1])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0], &x[1])?;
                let mut grads = p.grad_buffer();
                let (a, b) = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![a, b], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng), feat(&mut rng)]));
    }
    for (k1, k2) in [(3, 3), (3, 5)] {
        let mut params = ParamStore::new();
        let m = PixelWeights::new(&mut params, "pixel", s.c, &DepaConfig { k1, k2 }, &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            format!("pixel_weights k{k1}/k{k2}"),
            move |p, x| Ok(vec![m.forward(p, &x[0])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let gx = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng)]));
    }
    {
        let mut params = ParamStore::new();
        let m = Depa::new(&mut params, "depa", s.c, DepaConfig::default(), &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "depa",
            move |p, x| Ok(vec![m.forward(p, &x[0], &x[1])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0], &x[1])?;
                let mut grads = p.grad_buffer();
                let (a, b) = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![a, b], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng), feat(&mut rng)]));
    }
    {
        let mut params = ParamStore::new();
        let m = BidirFocus::new(&mut params, "focus", FocusConfig::new(s.c, 2 * s.c), &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "bidir_focus",
            move |p, x| Ok(vec![m.forward(p, &x[0])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let gx = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng)]));
    }

    // detector parts
    {
        let mut params = ParamStore::new();
        let m = ConvBlock::new(&mut params, "block", s.c, s.c, 2, &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "conv_block",
            move |p, x| Ok(vec![m.forward(p, &x[0])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let gx = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng)]));
    }
    {
        let mut params = ParamStore::new();
        let m = ScaleHead::new(&mut params, "head", s.c, s.c, 3, &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "head",
            move |p, x| Ok(vec![m.forward(p, &x[0])?.0]),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let gx = m2.backward(p, &cache, &g[0], &mut grads)?;
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        cases.push(case(op, params, vec![feat(&mut rng)]));
    }
    {
        let mut params = ParamStore::new();
        let m = Backbone::new(&mut params, "backbone", 4, true, &mut rng)?;
        let m2 = m.clone();
        let op = FnOp::new(
            "backbone",
            move |p, x| Ok(m.forward(p, &x[0])?.0.to_vec()),
            move |p, x, g| {
                let (_, cache) = m2.forward(p, &x[0])?;
                let mut grads = p.grad_buffer();
                let g: [T64; 3] = [g[0].clone(), g[1].clone(), g[2].clone()];
                let gx = m2.backward(p, &cache, &g, &mut grads)?;
                Ok(Vjp { inputs: vec![gx], params: grads })
            },
        );
        let x = rng.uniform_tensor((1, 3, 32, 32), 1.0);
        cases.push(Case {
            op: Box::new(op),
            params,
            inputs: vec![x],
            coverage: Coverage::Sample { count: 96, seed: seed ^ 0xb0 },
        });
    }
    {
        // loss with respect to raw predictions, targets from a generated scene
        let cfg = ModelConfig::default();
        let scene = gen_scene(&mut rng.fork(77), &SceneConfig::default(), 0);
        let targets = vec![assign_targets(&scene.labels, &cfg.grids(), cfg.image_size)?];
        let preds: Vec<T64> = cfg
            .grids()
            .iter()
            .map(|g| rng.normal_tensor((1, 5 + cfg.num_classes, g.rows, g.cols), 1.0))
            .collect();
        let k = cfg.num_classes;
        let t2 = targets.clone();
        let op = FnOp::new(
            "detection_loss",
            move |_, x| {
                let (loss, _) = detection_loss(x, &targets, k)?;
                Ok(vec![Tensor4::full((1, 1, 1, 1), loss.total)])
            },
            move |_, x, g| {
                let (_, grads) = detection_loss(x, &t2, k)?;
                let scale = g[0].data()[0];
                Ok(no_params(grads.iter().map(|t| t.scale(scale)).collect()))
            },
        );
        cases.push(case(op, ParamStore::new(), preds));
    }
    cases.push(full_model_case(seed)?);

    if corrupt {
        for c in &mut cases {
            let inner = std::mem::replace(&mut c.op, Box::new(FnOp::new("", |_, _| Ok(vec![]), |_, _, _| unreachable!())));
            c.op = Box::new(ScaledVjp { inner, factor: 1.01 });
        }
    }
    Ok(cases)
}

/// End-to-end spot check: both images through the full cross-modality detector
/// into the loss, on 8 random coordinates.
pub fn full_model_case(seed: u64) -> Result<Case> {
    let cfg = ModelConfig {
        width: 8,
        modality: Modality::Cross,
        deca: DecaConfig {
            se_reduction: 4,
            ..DecaConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut rng = SeededRng::new(seed).fork(0xf011);
    let mut params = ParamStore::new();
    let det = Detector::new(&mut params, cfg, &mut rng)?;
    let scene = gen_scene(&mut rng.fork(1), &SceneConfig::default(), 0);
    let targets = vec![assign_targets(&scene.labels, &cfg.grids(), cfg.image_size)?];
    let vis: T64 = scene.visible.to_tensor();
    let ir: T64 = scene.infrared.to_tensor();
    let det2 = det.clone();
    let t2 = targets.clone();
    let k = cfg.num_classes;
    let op = FnOp::new(
        "detector + loss",
        move |p, x| {
            let preds = det.predict(p, &x[0], &x[1])?;
            let (loss, _) = detection_loss(&preds, &targets, k)?;
            Ok(vec![Tensor4::full((1, 1, 1, 1), loss.total)])
        },
        move |p, x, g| {
            let (preds, cache) = det2.forward(p, &x[0], &x[1])?;
            let (_, gp) = detection_loss(&preds, &t2, k)?;
            let scale = g[0].data()[0];
            let gp: Vec<T64> = gp.iter().map(|t| t.scale(scale)).collect();
            let mut grads = p.grad_buffer();
            let (gv, gir) = det2.backward(p, &cache, &gp, &mut grads)?;
            Ok(Vjp {
                inputs: vec![gv.expect("visible stream"), gir.expect("infrared stream")],
                params: grads,
            })
        },
    );
    Ok(Case {
        op: Box::new(op),
        params,
        inputs: vec![vis, ir],
        coverage: Coverage::Sample { count: 8, seed },
    })
}

/// Result of checking one census entry.
#[derive(Clone, Debug)]
pub struct CaseOutcome {
    pub name: String,
    pub report: VjpReport,
    pub passed: bool,
}

/// Checks every case at step `eps`; a case passes when its error is below `tol`.
pub fn run(cases: &[Case], eps: f64, tol: f64) -> Result<Vec<CaseOutcome>> {
    cases
        .iter()
        .map(|c| {
            let report = c.check(eps)?;
            Ok(CaseOutcome {
                name: c.name(),
                passed: report.max_rel_error < tol,
                report,
            })
        })
        .collect()
}
