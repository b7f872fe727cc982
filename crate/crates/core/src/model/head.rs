//! Dense anchor-free prediction head.
//!
//! Output channel layout per cell: `[objectness, class_0 .. class_{K-1}, l, t, r, b]`,
//! all raw logits. Box distances are `softplus(raw)` in stride units.

use crate::error::Result;
use crate::layers::{Conv2d, GroupNorm};
use crate::ops::{self, ConvSpec, GroupNormCache};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor4};

/// Tiny enough that the input normalisation stays scale invariant for the
/// strongly attenuated fused maps.
pub const HEAD_NORM_EPS: f64 = 1e-20;
pub const OBJECTNESS_PRIOR_BIAS: f64 = -4.0;

pub fn head_channels(num_classes: usize) -> usize {
    5 + num_classes
}

#[derive(Clone, Debug)]
pub struct ScaleHead {
    pub norm: GroupNorm,
    pub hidden: Conv2d,
    pub out: Conv2d,
    pub num_classes: usize,
}

pub struct ScaleHeadCache<T> {
    norm: GroupNormCache<T>,
    normed: Tensor4<T>,
    pre: Tensor4<T>,
    act: Tensor4<T>,
}

impl ScaleHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        hidden: usize,
        num_classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let norm = GroupNorm::new(store, &format!("{name}.norm"), channels, 1, HEAD_NORM_EPS)?;
        let hidden_conv = Conv2d::new(store, &format!("{name}.hidden"), channels, hidden, 3, ConvSpec::same(3), true, rng)?;
        let out = Conv2d::pointwise(store, &format!("{name}.out"), hidden, head_channels(num_classes), true, rng)?;
        let bias = out.bias.expect("head output has a bias");
        store.value_mut(bias).data_mut()[0] = T::from_f64(OBJECTNESS_PRIOR_BIAS);
        Ok(Self {
            norm,
            hidden: hidden_conv,
            out,
            num_classes,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor4<T>) -> Result<(Tensor4<T>, ScaleHeadCache<T>)> {
        let (normed, norm) = self.norm.forward(store, x)?;
        let pre = self.hidden.forward(store, &normed)?;
        let act = ops::silu(&pre);
        let out = self.out.forward(store, &act)?;
        Ok((out, ScaleHeadCache { norm, normed, pre, act }))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ScaleHeadCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let g = self.out.backward(store, &cache.act, grad, grads)?;
        let g = ops::silu_backward(&cache.pre, &g);
        let g = self.hidden.backward(store, &cache.normed, &g, grads)?;
        Ok(self.norm.backward(store, &cache.norm, &g, grads))
    }
}
