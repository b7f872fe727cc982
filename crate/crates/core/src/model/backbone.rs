//! Per-modality feature extractor producing a three-scale pyramid.

use crate::error::{Error, Result};
use crate::focus::{BidirFocus, FocusCache, FocusConfig};
use crate::layers::{Conv2d, GroupNorm};
use crate::ops::{self, ConvSpec, GroupNormCache};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor4};

pub const NORM_EPS: f64 = 1e-5;

/// Feature maps at strides 8, 16 and 32.
pub type Pyramid<T> = [Tensor4<T>; 3];

pub const STRIDES: [usize; 3] = [8, 16, 32];

fn norm_groups(c: usize) -> usize {
    if c % 4 == 0 {
        4
    } else {
        1
    }
}

/// Convolution without bias, group normalisation, SiLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

pub struct ConvBlockCache<T> {
    x: Tensor4<T>,
    norm: GroupNormCache<T>,
    pre: Tensor4<T>,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 3, ConvSpec::new(stride, 1, 1), false, rng)?,
            norm: GroupNorm::new(store, &format!("{name}.norm"), c_out, norm_groups(c_out), NORM_EPS)?,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, ConvBlockCache<T>)> {
        let y = self.conv.forward(store, x)?;
        let (pre, norm) = self.norm.forward(store, &y)?;
        let out = ops::silu(&pre);
        Ok((out, ConvBlockCache { x: x.clone(), norm, pre }))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ConvBlockCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let g = ops::silu_backward(&cache.pre, grad);
        let g = self.norm.backward(store, &cache.norm, &g, grads);
        self.conv.backward(store, &cache.x, &g, grads)
    }
}

/// Second 2x reduction: the decoupled focus block or a plain strided block.
#[derive(Clone, Debug)]
pub enum Downsample {
    Focus { focus: BidirFocus, norm: GroupNorm },
    Conv(ConvBlock),
}

pub enum DownsampleCache<T> {
    Focus {
        focus: FocusCache<T>,
        norm: GroupNormCache<T>,
        pre: Tensor4<T>,
    },
    Conv(ConvBlockCache<T>),
}

impl Downsample {
    fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, DownsampleCache<T>)> {
        match self {
            Self::Focus { focus, norm } => {
                let (y, fc) = focus.forward(store, x)?;
                let (pre, nc) = norm.forward(store, &y)?;
                Ok((
                    ops::silu(&pre),
                    DownsampleCache::Focus {
                        focus: fc,
                        norm: nc,
                        pre,
                    },
                ))
            }
            Self::Conv(block) => {
                let (y, c) = block.forward(store, x)?;
                Ok((y, DownsampleCache::Conv(c)))
            }
        }
    }

    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &DownsampleCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        match (self, cache) {
            (Self::Focus { focus, norm }, DownsampleCache::Focus { focus: fc, norm: nc, pre }) => {
                let g = ops::silu_backward(pre, grad);
                let g = norm.backward(store, nc, &g, grads);
                focus.backward(store, fc, &g, grads)
            }
            (Self::Conv(block), DownsampleCache::Conv(c)) => block.backward(store, c, grad, grads),
            _ => unreachable!("downsample cache built by a different variant"),
        }
    }
}

/// Strided reduction followed by a same-resolution refinement.
#[derive(Clone, Debug)]
pub struct Stage {
    pub down: ConvBlock,
    pub refine: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: ConvBlock,
    pub down: Downsample,
    pub stages: [Stage; 3],
}

pub struct BackboneCache<T> {
    stem: ConvBlockCache<T>,
    down: DownsampleCache<T>,
    stages: Vec<(ConvBlockCache<T>, ConvBlockCache<T>)>,
}

impl Backbone {
    /// Pyramid widths are `(width, 2 width, 4 width)`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        use_focus: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if width < 2 || width % 2 != 0 {
            return Err(Error::InvalidArgument(format!("width must be even and >= 2, got {width}")));
        }
        let half = width / 2;
        let stem = ConvBlock::new(store, &format!("{name}.stem"), 3, half, 2, rng)?;
        let down = if use_focus {
            let focus = BidirFocus::new(store, &format!("{name}.focus"), FocusConfig::new(half, width), rng)?;
            let norm = GroupNorm::new(store, &format!("{name}.focus_norm"), width, norm_groups(width), NORM_EPS)?;
            Downsample::Focus { focus, norm }
        } else {
            Downsample::Conv(ConvBlock::new(store, &format!("{name}.down"), half, width, 2, rng)?)
        };
        let mut stage = |i: usize, c_in: usize, c_out: usize| -> Result<Stage> {
            Ok(Stage {
                down: ConvBlock::new(store, &format!("{name}.p{}.down", i + 3), c_in, c_out, 2, rng)?,
                refine: ConvBlock::new(store, &format!("{name}.p{}.refine", i + 3), c_out, c_out, 1, rng)?,
            })
        };
        let stages = [stage(0, width, width)?, stage(1, width, 2 * width)?, stage(2, 2 * width, 4 * width)?];
        Ok(Self { stem, down, stages })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, image: &Tensor4<T>) -> Result<(Pyramid<T>, BackboneCache<T>)> {
        let s = image.shape();
        if s.c != 3 || s.h % 32 != 0 || s.w % 32 != 0 || s.h == 0 || s.w == 0 {
            return Err(Error::InvalidShape {
                op: "backbone",
                shape: s,
                reason: "expected 3 channels and height/width divisible by 32".into(),
            });
        }
        let (x, stem) = self.stem.forward(store, image)?;
        let (mut x, down) = self.down.forward(store, &x)?;
        let mut stages = Vec::with_capacity(3);
        let mut outs = Vec::with_capacity(3);
        for st in &self.stages {
            let (y, c1) = st.down.forward(store, &x)?;
            let (y, c2) = st.refine.forward(store, &y)?;
            stages.push((c1, c2));
            outs.push(y.clone());
            x = y;
        }
        let pyramid: Pyramid<T> = outs.try_into().ok().expect("three stages");
        Ok((pyramid, BackboneCache { stem, down, stages }))
    }

    /// Accumulates parameter gradients. Returns the image gradient.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BackboneCache<T>,
        grad: &Pyramid<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let mut carry: Option<Tensor4<T>> = None;
        for i in (0..3).rev() {
            let mut g = grad[i].clone();
            if let Some(c) = carry.take() {
                g.add_assign(&c)?;
            }
            let (c1, c2) = &cache.stages[i];
            let g = self.stages[i].refine.backward(store, c2, &g, grads)?;
            carry = Some(self.stages[i].down.backward(store, c1, &g, grads)?);
        }
        let g = self.down.backward(store, &cache.down, &carry.expect("three stages"), grads)?;
        self.stem.backward(store, &cache.stem, &g, grads)
    }
}
