//! Dual semantic enhancing channel weight assignment.
//!
//! The two modality features are mixed (concat + 1x1 conv) and squeezed
//! spatially into cross-modality channel logits. Each modality also gets an
//! SE-style sigmoid gate. The softmaxed cross-modality weights scale both gates,
//! and each gate is then applied to the *other* modality's feature map:
//!
//! ```text
//! mix      = conv1x1(concat(f_v, f_ir))
//! w_mix    = cmwe(mix)                      b x c x 1 x 1 logits
//! w_en_v   = cwe_v(f_v)  * softmax(w_mix)
//! w_en_ir  = cwe_ir(f_ir) * softmax(w_mix)
//! f_ir'    = f_ir (.) w_en_v
//! f_v'     = f_v  (.) w_en_ir
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::ops::{self, ConvSpec};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{concat_channels, split_channels, Real, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmweKind {
    Standard,
    Depthwise,
}

impl std::str::FromStr for CmweKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "depthwise" => Ok(Self::Depthwise),
            other => Err(Error::InvalidArgument(format!(
                "unknown cmwe kind `{other}` (expected standard or depthwise)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecaConfig {
    /// Number of stride-2 convolutions in the cross-modality weight extractor (2 or 3).
    pub cmwe_layers: usize,
    pub cmwe_kind: CmweKind,
    pub se_reduction: usize,
}

impl Default for DecaConfig {
    fn default() -> Self {
        Self {
            cmwe_layers: 3,
            cmwe_kind: CmweKind::Depthwise,
            se_reduction: 16,
        }
    }
}

impl DecaConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(2..=3).contains(&self.cmwe_layers) {
            return Err(Error::InvalidArgument(format!(
                "deca.cmwe_layers must be 2 or 3, got {}",
                self.cmwe_layers
            )));
        }
        if self.se_reduction == 0 || channels % self.se_reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible by deca.se_reduction = {}",
                self.se_reduction
            )));
        }
        Ok(())
    }

    /// Smallest height/width the stride chain accepts.
    pub fn min_spatial(&self) -> usize {
        1 << self.cmwe_layers
    }
}

/// `concat(f_v, f_ir)` followed by a bias-free 1x1 convolution back to `c` channels.
#[derive(Clone, Debug)]
pub struct MixChannels {
    pub conv: Conv2d,
}

impl MixChannels {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::pointwise(store, name, 2 * c, c, false, rng)?,
        })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_v: &Tensor4<T>,
        f_ir: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        f_v.expect_same_shape("mix_channels", f_ir)?;
        let cat = concat_channels(&[f_v, f_ir])?;
        let mixed = self.conv.forward(store, &cat)?;
        Ok((mixed, cat))
    }

    /// Returns gradients for `(f_v, f_ir)`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cat: &Tensor4<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let g_cat = self.conv.backward(store, cat, grad, grads)?;
        let c = cat.shape().c / 2;
        let mut parts = split_channels(&g_cat, &[c, c])?.into_iter();
        Ok((parts.next().unwrap(), parts.next().unwrap()))
    }
}

/// Cross-modality weight extraction: a chain of stride-2 3x3 convolutions with
/// ReLU between layers, then global average pooling to `b x c x 1 x 1` logits.
#[derive(Clone, Debug)]
pub struct Cmwe {
    pub layers: Vec<Conv2d>,
}

pub struct CmweCache<T> {
    /// Input of each convolution.
    inputs: Vec<Tensor4<T>>,
    /// Pre-activation output of each convolution.
    pre: Vec<Tensor4<T>>,
}

impl Cmwe {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: &DecaConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let groups = match cfg.cmwe_kind {
            CmweKind::Standard => 1,
            CmweKind::Depthwise => c,
        };
        let layers = (0..cfg.cmwe_layers)
            .map(|i| {
                Conv2d::new(
                    store,
                    &format!("{name}.{i}"),
                    c,
                    c,
                    3,
                    ConvSpec::new(2, 1, groups),
                    true,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, f_mix: &Tensor4<T>) -> Result<(Tensor4<T>, CmweCache<T>)> {
        let s = f_mix.shape();
        let min = 1 << self.layers.len();
        if s.h < min || s.w < min {
            return Err(Error::TooSmall {
                op: "cmwe",
                h: s.h,
                w: s.w,
                min,
            });
        }
        let mut cache = CmweCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut x = f_mix.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(store, &x)?;
            let next = if i + 1 < self.layers.len() { ops::relu(&z) } else { z.clone() };
            cache.inputs.push(std::mem::replace(&mut x, next));
            cache.pre.push(z);
        }
        Ok((ops::global_avg_pool(&x), cache))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &CmweCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let last = cache.pre.last().expect("at least one layer").shape();
        let mut g = ops::global_avg_pool_backward(last, grad);
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 < self.layers.len() {
                g = ops::relu_backward(&cache.pre[i], &g);
            }
            g = layer.backward(store, &cache.inputs[i], &g, grads)?;
        }
        Ok(g)
    }
}

/// SE-style channel weight extraction: pool, `c -> c/r`, ReLU, `c/r -> c`, sigmoid.
#[derive(Clone, Debug)]
pub struct Cwe {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

pub struct CweCache<T> {
    input_shape: Shape4,
    pooled: Tensor4<T>,
    hidden_pre: Tensor4<T>,
    hidden: Tensor4<T>,
    gate: Tensor4<T>,
}

impl Cwe {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        reduction: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if reduction == 0 || c % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "cwe: {c} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = c / reduction;
        Ok(Self {
            squeeze: Conv2d::pointwise(store, &format!("{name}.squeeze"), c, hidden, true, rng)?,
            excite: Conv2d::pointwise(store, &format!("{name}.excite"), hidden, c, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, f: &Tensor4<T>) -> Result<(Tensor4<T>, CweCache<T>)> {
        if f.shape().c != self.squeeze.c_in {
            return Err(Error::InvalidShape {
                op: "cwe",
                shape: f.shape(),
                reason: format!("expected {} channels", self.squeeze.c_in),
            });
        }
        let pooled = ops::global_avg_pool(f);
        let hidden_pre = self.squeeze.forward(store, &pooled)?;
        let hidden = ops::relu(&hidden_pre);
        let gate = ops::sigmoid(&self.excite.forward(store, &hidden)?);
        Ok((
            gate.clone(),
            CweCache {
                input_shape: f.shape(),
                pooled,
                hidden_pre,
                hidden,
                gate,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &CweCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor4<T>> {
        let g = ops::sigmoid_backward(&cache.gate, grad);
        let g = self.excite.backward(store, &cache.hidden, &g, grads)?;
        let g = ops::relu_backward(&cache.hidden_pre, &g);
        let g = self.squeeze.backward(store, &cache.pooled, &g, grads)?;
        Ok(ops::global_avg_pool_backward(cache.input_shape, &g))
    }
}

/// The full channel-fusion block.
#[derive(Clone, Debug)]
pub struct Deca {
    pub cfg: DecaConfig,
    pub mix: MixChannels,
    pub cmwe: Cmwe,
    pub cwe_v: Cwe,
    pub cwe_ir: Cwe,
}

pub struct DecaCache<T> {
    f_v: Tensor4<T>,
    f_ir: Tensor4<T>,
    cat: Tensor4<T>,
    cmwe: CmweCache<T>,
    soft: Tensor4<T>,
    w_v: Tensor4<T>,
    w_ir: Tensor4<T>,
    cwe_v: CweCache<T>,
    cwe_ir: CweCache<T>,
    w_en_v: Tensor4<T>,
    w_en_ir: Tensor4<T>,
}

/// Intermediate weights, exposed for inspection and tests.
pub struct DecaWeights<'a, T> {
    pub soft_mix: &'a Tensor4<T>,
    pub w_en_v: &'a Tensor4<T>,
    pub w_en_ir: &'a Tensor4<T>,
}

impl<T> DecaCache<T> {
    pub fn weights(&self) -> DecaWeights<'_, T> {
        DecaWeights {
            soft_mix: &self.soft,
            w_en_v: &self.w_en_v,
            w_en_ir: &self.w_en_ir,
        }
    }
}

impl Deca {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        cfg: DecaConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        cfg.validate(c)?;
        Ok(Self {
            cfg,
            mix: MixChannels::new(store, &format!("{name}.mix"), c, rng)?,
            cmwe: Cmwe::new(store, &format!("{name}.cmwe"), c, &cfg, rng)?,
            cwe_v: Cwe::new(store, &format!("{name}.cwe_v"), c, cfg.se_reduction, rng)?,
            cwe_ir: Cwe::new(store, &format!("{name}.cwe_ir"), c, cfg.se_reduction, rng)?,
        })
    }

    /// Returns `(f_v1, f_ir1)`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_v: &Tensor4<T>,
        f_ir: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>, DecaCache<T>)> {
        let (mixed, cat) = self.mix.forward(store, f_v, f_ir)?;
        let (w_mix, cmwe) = self.cmwe.forward(store, &mixed)?;
        let soft = ops::softmax_channel(&w_mix);
        let (w_v, cwe_v) = self.cwe_v.forward(store, f_v)?;
        let (w_ir, cwe_ir) = self.cwe_ir.forward(store, f_ir)?;
        let w_en_v = ops::mul(&w_v, &soft)?;
        let w_en_ir = ops::mul(&w_ir, &soft)?;
        let f_ir1 = ops::mul_channel(f_ir, &w_en_v)?;
        let f_v1 = ops::mul_channel(f_v, &w_en_ir)?;
        Ok((
            f_v1,
            f_ir1,
            DecaCache {
                f_v: f_v.clone(),
                f_ir: f_ir.clone(),
                cat,
                cmwe,
                soft,
                w_v,
                w_ir,
                cwe_v,
                cwe_ir,
                w_en_v,
                w_en_ir,
            },
        ))
    }

    /// Returns gradients for `(f_v0, f_ir0)`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &DecaCache<T>,
        grad_v1: &Tensor4<T>,
        grad_ir1: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let (mut g_ir, g_en_v) = ops::mul_channel_backward(&cache.f_ir, &cache.w_en_v, grad_ir1);
        let (mut g_v, g_en_ir) = ops::mul_channel_backward(&cache.f_v, &cache.w_en_ir, grad_v1);

        let (g_wv, g_soft_a) = ops::mul_backward(&cache.w_v, &cache.soft, &g_en_v);
        let (g_wir, g_soft_b) = ops::mul_backward(&cache.w_ir, &cache.soft, &g_en_ir);
        let g_soft = g_soft_a.add(&g_soft_b)?;

        let g_wmix = ops::softmax_channel_backward(&cache.soft, &g_soft);
        let g_mixed = self.cmwe.backward(store, &cache.cmwe, &g_wmix, grads)?;
        let (gv_mix, gir_mix) = self.mix.backward(store, &cache.cat, &g_mixed, grads)?;

        g_v.add_assign(&gv_mix)?;
        g_v.add_assign(&self.cwe_v.backward(store, &cache.cwe_v, &g_wv, grads)?)?;
        g_ir.add_assign(&gir_mix)?;
        g_ir.add_assign(&self.cwe_ir.backward(store, &cache.cwe_ir, &g_wir, grads)?)?;
        Ok((g_v, g_ir))
    }

    /// Copy of `store` with visible-side and infrared-side parameters exchanged,
    /// so that running on swapped inputs swaps the outputs.
    pub fn swap_sides<T: Real>(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        let pairs = [
            (self.cwe_v.squeeze.weight, self.cwe_ir.squeeze.weight),
            (self.cwe_v.squeeze.bias.unwrap(), self.cwe_ir.squeeze.bias.unwrap()),
            (self.cwe_v.excite.weight, self.cwe_ir.excite.weight),
            (self.cwe_v.excite.bias.unwrap(), self.cwe_ir.excite.bias.unwrap()),
        ];
        for (a, b) in pairs {
            *out.value_mut(a) = store.value(b).clone();
            *out.value_mut(b) = store.value(a).clone();
        }
        // the mix kernel sees concat(second, first): swap its input-channel halves
        let k = store.value(self.mix.conv.weight);
        let half = k.shape().c / 2;
        let swapped = Tensor4::from_fn(k.shape(), |o, i, y, x| k.at(o, (i + half) % (2 * half), y, x));
        *out.value_mut(self.mix.conv.weight) = swapped;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(c: usize, cfg: DecaConfig, seed: u64) -> (Deca, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let deca = Deca::new(&mut store, "deca", c, cfg, &mut rng).unwrap();
        (deca, store)
    }

    fn small_cfg() -> DecaConfig {
        DecaConfig {
            se_reduction: 4,
            ..DecaConfig::default()
        }
    }

    #[test]
    fn default_is_three_depthwise_layers() {
        let cfg = DecaConfig::default();
        assert_eq!((cfg.cmwe_layers, cfg.cmwe_kind, cfg.se_reduction), (3, CmweKind::Depthwise, 16));
    }

    #[test]
    fn shapes_are_preserved() {
        let (deca, store) = build(8, small_cfg(), 1);
        let mut rng = SeededRng::new(2);
        let fv: Tensor4<f64> = rng.normal_tensor((2, 8, 16, 16), 1.0);
        let fir: Tensor4<f64> = rng.normal_tensor((2, 8, 16, 16), 1.0);
        let (mixed, _) = deca.mix.forward(&store, &fv, &fir).unwrap();
        assert_eq!(mixed.shape(), Shape4::new(2, 8, 16, 16));
        let (logits, _) = deca.cmwe.forward(&store, &mixed).unwrap();
        assert_eq!(logits.shape(), Shape4::new(2, 8, 1, 1));
        let (v1, ir1, _) = deca.forward(&store, &fv, &fir).unwrap();
        assert_eq!(v1.shape(), fv.shape());
        assert_eq!(ir1.shape(), fir.shape());
    }

    #[test]
    fn mix_of_zero_inputs_is_zero() {
        let (deca, store) = build(4, small_cfg(), 1);
        let z = Tensor4::<f64>::zeros((1, 4, 8, 8));
        let (mixed, _) = deca.mix.forward(&store, &z, &z).unwrap();
        assert!(mixed.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let (deca, store) = build(4, small_cfg(), 1);
        let a = Tensor4::<f64>::zeros((1, 4, 8, 8));
        let b = Tensor4::<f64>::zeros((1, 4, 8, 6));
        assert!(matches!(deca.forward(&store, &a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn cmwe_too_small_names_minimum() {
        let (deca, store) = build(4, small_cfg(), 1);
        let x = Tensor4::<f64>::zeros((1, 4, 4, 4));
        let err = deca.cmwe.forward(&store, &x).err().unwrap();
        assert!(matches!(err, Error::TooSmall { min: 8, .. }), "{err}");
    }

    #[test]
    fn depthwise_cmwe_keeps_channels_independent() {
        let (deca, store) = build(4, small_cfg(), 5);
        let base = Tensor4::<f64>::full((1, 4, 8, 8), 0.7);
        let mut bumped = base.clone();
        for v in bumped.plane_mut(0, 2) {
            *v += 3.0;
        }
        let (a, _) = deca.cmwe.forward(&store, &base).unwrap();
        let (b, _) = deca.cmwe.forward(&store, &bumped).unwrap();
        for c in [0, 1, 3] {
            assert_eq!(a.at(0, c, 0, 0), b.at(0, c, 0, 0));
        }
        assert_ne!(a.at(0, 2, 0, 0), b.at(0, 2, 0, 0));
    }

    #[test]
    fn cwe_with_zeroed_linears_is_half() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(0);
        let cwe = Cwe::new(&mut store, "cwe", 8, 4, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let (gate, _) = cwe.forward(&store, &Tensor4::zeros((2, 8, 3, 3))).unwrap();
        assert!(gate.data().iter().all(|&v| v == 0.5));
        assert!(Cwe::new(&mut store, "bad", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_visible_gives_zero_visible_output() {
        let (deca, store) = build(4, small_cfg(), 3);
        let mut rng = SeededRng::new(4);
        let fir: Tensor4<f64> = rng.normal_tensor((2, 4, 8, 8), 1.0);
        let (v1, _, _) = deca.forward(&store, &Tensor4::zeros(fir.shape()), &fir).unwrap();
        assert!(v1.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_streams_and_params_give_identical_outputs() {
        let (deca, mut store) = build(4, small_cfg(), 3);
        let copies = [
            (deca.cwe_v.squeeze.weight, deca.cwe_ir.squeeze.weight),
            (deca.cwe_v.squeeze.bias.unwrap(), deca.cwe_ir.squeeze.bias.unwrap()),
            (deca.cwe_v.excite.weight, deca.cwe_ir.excite.weight),
            (deca.cwe_v.excite.bias.unwrap(), deca.cwe_ir.excite.bias.unwrap()),
        ];
        for (v, ir) in copies {
            *store.value_mut(ir) = store.value(v).clone();
        }
        let mut rng = SeededRng::new(8);
        let f: Tensor4<f64> = rng.normal_tensor((2, 4, 8, 8), 1.0);
        let (v1, ir1, _) = deca.forward(&store, &f, &f).unwrap();
        assert_eq!(v1, ir1);
    }
}
