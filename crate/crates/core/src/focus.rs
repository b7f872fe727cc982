//! Bi-directional decoupled focus: a 2x downsampling block that splits the
//! pixels of every 2x2 cell into two diagonal groups, convolves each group,
//! appends a pooled copy of the input and mixes with a depth-wise then a
//! point-wise convolution.
//!
//! With `s_ij = x[i::2, j::2]`, group one is `{s00, s11}` and group two is
//! `{s01, s10}`. Together the four slices cover every input pixel exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops::{self, ConvSpec};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{concat_channels, split_channels, Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FocusConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl FocusConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
        }
    }
}

fn check_even(op: &'static str, s: Shape4) -> Result<()> {
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::InvalidShape {
            op,
            shape: s,
            reason: "height and width must be even".into(),
        });
    }
    Ok(())
}

/// Phase offsets `(row, col)` of the two slices in each group.
const GROUP1: [(usize, usize); 2] = [(0, 0), (1, 1)];
const GROUP2: [(usize, usize); 2] = [(0, 1), (1, 0)];

fn gather<T: Real>(x: &Tensor4<T>, phases: [(usize, usize); 2]) -> Tensor4<T> {
    let s = x.shape();
    let c = s.c;
    Tensor4::from_fn((s.b, 2 * c, s.h / 2, s.w / 2), |b, ch, y, xx| {
        let (dy, dx) = phases[ch / c];
        x.at(b, ch % c, 2 * y + dy, 2 * xx + dx)
    })
}

fn scatter<T: Real>(g: &Tensor4<T>, phases: [(usize, usize); 2], out: &mut Tensor4<T>) {
    let gs = g.shape();
    let c = gs.c / 2;
    for b in 0..gs.b {
        for ch in 0..gs.c {
            let (dy, dx) = phases[ch / c];
            for y in 0..gs.h {
                for xx in 0..gs.w {
                    out.set(b, ch % c, 2 * y + dy, 2 * xx + dx, g.at(b, ch, y, xx));
                }
            }
        }
    }
}

/// Splits `x` into the two diagonal pixel groups, each `b x 2c x h/2 x w/2`.
pub fn decouple_slices<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>)> {
    check_even("decouple_slices", x.shape())?;
    Ok((gather(x, GROUP1), gather(x, GROUP2)))
}

/// Adjoint of [`decouple_slices`]; since the slices partition the input this is
/// also its inverse.
pub fn decouple_slices_backward<T: Real>(
    input_shape: Shape4,
    g1: &Tensor4<T>,
    g2: &Tensor4<T>,
) -> Tensor4<T> {
    let mut out = Tensor4::zeros(input_shape);
    scatter(g1, GROUP1, &mut out);
    scatter(g2, GROUP2, &mut out);
    out
}

#[derive(Clone, Debug)]
pub struct BidirFocus {
    pub cfg: FocusConfig,
    pub conv_g1: Conv2d,
    pub conv_g2: Conv2d,
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

pub struct FocusCache<T> {
    input_shape: Shape4,
    g1: Tensor4<T>,
    g2: Tensor4<T>,
    cat: Tensor4<T>,
    mixed: Tensor4<T>,
}

impl BidirFocus {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: FocusConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let c = cfg.in_channels;
        let k = cfg.kernel;
        if k % 2 == 0 {
            return Err(Error::InvalidArgument(format!("focus kernel {k} must be odd")));
        }
        Ok(Self {
            cfg,
            conv_g1: Conv2d::new(store, &format!("{name}.group1"), 2 * c, c, k, ConvSpec::same(k), false, rng)?,
            conv_g2: Conv2d::new(store, &format!("{name}.group2"), 2 * c, c, k, ConvSpec::same(k), false, rng)?,
            depthwise: Conv2d::new(
                store,
                &format!("{name}.depthwise"),
                3 * c,
                3 * c,
                3,
                ConvSpec::same(3).with_groups(3 * c),
                false,
                rng,
            )?,
            pointwise: Conv2d::pointwise(store, &format!("{name}.pointwise"), 3 * c, cfg.out_channels, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, FocusCache<T>)> {
        if x.shape().c != self.cfg.in_channels {
            return Err(Error::InvalidShape {
                op: "bidir_focus",
                shape: x.shape(),
                reason: format!("expected {} channels", self.cfg.in_channels),
            });
        }
        let (g1, g2) = decouple_slices(x)?;
        let a = self.conv_g1.forward(store, &g1)?;
        let b = self.conv_g2.forward(store, &g2)?;
        let pooled = ops::avg_pool2x2(x)?;
        let cat = concat_channels(&[&a, &b, &pooled])?;
        let mixed = self.depthwise.forward(store, &cat)?;
        let out = self.pointwise.forward(store, &mixed)?;
        Ok((
            out,
            FocusCache {
                input_shape: x.shape(),
                g1,
                g2,
                cat,
                mixed,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &FocusCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let c = self.cfg.in_channels;
        let g = self.pointwise.backward(store, &cache.mixed, grad, grads)?;
        let g = self.depthwise.backward(store, &cache.cat, &g, grads)?;
        let parts = split_channels(&g, &[c, c, c])?;
        let g1 = self.conv_g1.backward(store, &cache.g1, &parts[0], grads)?;
        let g2 = self.conv_g2.backward(store, &cache.g2, &parts[1], grads)?;
        let mut gx = decouple_slices_backward(cache.input_shape, &g1, &g2);
        gx.add_assign(&ops::avg_pool2x2_backward(cache.input_shape, &parts[2]))?;
        Ok(gx)
    }
}
