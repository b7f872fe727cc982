//! Dual spatial enhancing pixel weight assignment.
//!
//! ```text
//! w_mix    = conv1x1_v(f_v) * conv1x1_ir(f_ir)          b x 1 x h x w
//! s        = softmax over h*w of w_mix
//! p_v      = conv1x1(concat(conv_k1(f_v), conv_k2(f_v)))  (same for p_ir)
//! out      = f_ir (.) (p_v * s) + f_v (.) (p_ir * s)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops::{self, ConvSpec};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{concat_channels, split_channels, Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepaConfig {
    pub k1: usize,
    pub k2: usize,
}

impl Default for DepaConfig {
    fn default() -> Self {
        Self { k1: 3, k2: 3 }
    }
}

impl DepaConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, k) in [("depa.k1", self.k1), ("depa.k2", self.k2)] {
            if k % 2 == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{key} = {k}: kernel size must be odd"
                )));
            }
        }
        Ok(())
    }
}

/// Cross-modality pixel weights: one bias-free `c -> 1` projection per side, multiplied.
#[derive(Clone, Debug)]
pub struct DepaMix {
    pub proj_v: Conv2d,
    pub proj_ir: Conv2d,
}

pub struct DepaMixCache<T> {
    f_v: Tensor4<T>,
    f_ir: Tensor4<T>,
    a: Tensor4<T>,
    b: Tensor4<T>,
}

impl DepaMix {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            proj_v: Conv2d::pointwise(store, &format!("{name}.v"), c, 1, false, rng)?,
            proj_ir: Conv2d::pointwise(store, &format!("{name}.ir"), c, 1, false, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_v: &Tensor4<T>,
        f_ir: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, DepaMixCache<T>)> {
        f_v.expect_same_shape("depa_mix", f_ir)?;
        let a = self.proj_v.forward(store, f_v)?;
        let b = self.proj_ir.forward(store, f_ir)?;
        let w = ops::mul(&a, &b)?;
        Ok((
            w,
            DepaMixCache {
                f_v: f_v.clone(),
                f_ir: f_ir.clone(),
                a,
                b,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &DepaMixCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let (ga, gb) = ops::mul_backward(&cache.a, &cache.b, grad);
        let gv = self.proj_v.backward(store, &cache.f_v, &ga, grads)?;
        let gir = self.proj_ir.backward(store, &cache.f_ir, &gb, grads)?;
        Ok((gv, gir))
    }
}

/// Per-modality pixel weights from two kernel sizes, compressed `2 -> 1`.
#[derive(Clone, Debug)]
pub struct PixelWeights {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub compress: Conv2d,
}

pub struct PixelWeightsCache<T> {
    f: Tensor4<T>,
    cat: Tensor4<T>,
}

impl PixelWeights {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &DepaConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.k1"), c, 1, cfg.k1, ConvSpec::same(cfg.k1), true, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.k2"), c, 1, cfg.k2, ConvSpec::same(cfg.k2), true, rng)?,
            compress: Conv2d::pointwise(store, &format!("{name}.compress"), 2, 1, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, f: &Tensor4<T>) -> Result<(Tensor4<T>, PixelWeightsCache<T>)> {
        let a = self.conv1.forward(store, f)?;
        let b = self.conv2.forward(store, f)?;
        let cat = concat_channels(&[&a, &b])?;
        let w = self.compress.forward(store, &cat)?;
        Ok((w, PixelWeightsCache { f: f.clone(), cat }))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &PixelWeightsCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let g_cat = self.compress.backward(store, &cache.cat, grad, grads)?;
        let parts = split_channels(&g_cat, &[1, 1])?;
        let mut g = self.conv1.backward(store, &cache.f, &parts[0], grads)?;
        g.add_assign(&self.conv2.backward(store, &cache.f, &parts[1], grads)?)?;
        Ok(g)
    }
}

#[derive(Clone, Debug)]
pub struct Depa {
    pub cfg: DepaConfig,
    pub mix: DepaMix,
    pub pixel_v: PixelWeights,
    pub pixel_ir: PixelWeights,
}

pub struct DepaCache<T> {
    f_v: Tensor4<T>,
    f_ir: Tensor4<T>,
    mix: DepaMixCache<T>,
    soft: Tensor4<T>,
    p_v: Tensor4<T>,
    p_ir: Tensor4<T>,
    pv_cache: PixelWeightsCache<T>,
    pir_cache: PixelWeightsCache<T>,
    w_en_v: Tensor4<T>,
    w_en_ir: Tensor4<T>,
}

impl<T> DepaCache<T> {
    /// Spatially softmaxed cross-modality weights.
    pub fn soft_mix(&self) -> &Tensor4<T> {
        &self.soft
    }
}

impl Depa {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: DepaConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            mix: DepaMix::new(store, &format!("{name}.mix"), c, rng)?,
            pixel_v: PixelWeights::new(store, &format!("{name}.pixel_v"), c, &cfg, rng)?,
            pixel_ir: PixelWeights::new(store, &format!("{name}.pixel_ir"), c, &cfg, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_v: &Tensor4<T>,
        f_ir: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, DepaCache<T>)> {
        let (w_mix, mix) = self.mix.forward(store, f_v, f_ir)?;
        let soft = ops::softmax_spatial(&w_mix);
        let (p_v, pv_cache) = self.pixel_v.forward(store, f_v)?;
        let (p_ir, pir_cache) = self.pixel_ir.forward(store, f_ir)?;
        let w_en_ir = ops::mul(&p_ir, &soft)?;
        let w_en_v = ops::mul(&p_v, &soft)?;
        let fused_ir = ops::mul_spatial(f_ir, &w_en_v)?;
        let fused_v = ops::mul_spatial(f_v, &w_en_ir)?;
        let out = fused_ir.add(&fused_v)?;
        Ok((
            out,
            DepaCache {
                f_v: f_v.clone(),
                f_ir: f_ir.clone(),
                mix,
                soft,
                p_v,
                p_ir,
                pv_cache,
                pir_cache,
                w_en_v,
                w_en_ir,
            },
        ))
    }

    /// Returns gradients for `(f_v1, f_ir1)`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &DepaCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let (mut g_ir, g_en_v) = ops::mul_spatial_backward(&cache.f_ir, &cache.w_en_v, grad);
        let (mut g_v, g_en_ir) = ops::mul_spatial_backward(&cache.f_v, &cache.w_en_ir, grad);
        let (g_pv, g_soft_a) = ops::mul_backward(&cache.p_v, &cache.soft, &g_en_v);
        let (g_pir, g_soft_b) = ops::mul_backward(&cache.p_ir, &cache.soft, &g_en_ir);
        let g_soft = g_soft_a.add(&g_soft_b)?;
        let g_mix = ops::softmax_spatial_backward(&cache.soft, &g_soft);
        let (gv_mix, gir_mix) = self.mix.backward(store, &cache.mix, &g_mix, grads)?;
        g_v.add_assign(&gv_mix)?;
        g_v.add_assign(&self.pixel_v.backward(store, &cache.pv_cache, &g_pv, grads)?)?;
        g_ir.add_assign(&gir_mix)?;
        g_ir.add_assign(&self.pixel_ir.backward(store, &cache.pir_cache, &g_pir, grads)?)?;
        Ok((g_v, g_ir))
    }

    /// Copy of `store` with every visible-side parameter exchanged with its infrared twin.
    pub fn swap_sides<T: Real>(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        let mut pairs = vec![(self.mix.proj_v.weight, self.mix.proj_ir.weight)];
        for (a, b) in [
            (&self.pixel_v.conv1, &self.pixel_ir.conv1),
            (&self.pixel_v.conv2, &self.pixel_ir.conv2),
            (&self.pixel_v.compress, &self.pixel_ir.compress),
        ] {
            pairs.push((a.weight, b.weight));
            if let (Some(x), Some(y)) = (a.bias, b.bias) {
                pairs.push((x, y));
            }
        }
        for (a, b) in pairs {
            *out.value_mut(a) = store.value(b).clone();
            *out.value_mut(b) = store.value(a).clone();
        }
        out
    }
}
