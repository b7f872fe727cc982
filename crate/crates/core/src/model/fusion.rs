//! Per-scale merge of the two modality pyramids.

use crate::deca::{Deca, DecaCache, DecaConfig};
use crate::depa::{Depa, DepaCache, DepaConfig};
use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor4};

/// Channel fusion (optional) followed by pixel fusion or plain addition.
#[derive(Clone, Debug)]
pub struct ScaleFusion {
    pub deca: Option<Deca>,
    pub depa: Option<Depa>,
}

pub struct ScaleFusionCache<T> {
    deca: Option<DecaCache<T>>,
    depa: Option<DepaCache<T>>,
}

/// Stride-2 layers the channel-fusion squeeze can run on an `extent x extent`
/// map: the configured count, capped at `log2(extent)`.
pub fn cmwe_layers_for(cfg: &DecaConfig, extent: usize) -> usize {
    let fit = usize::BITS as usize - 1 - extent.max(1).leading_zeros() as usize;
    cfg.cmwe_layers.min(fit)
}

impl ScaleFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        extent: usize,
        deca: Option<DecaConfig>,
        depa: Option<DepaConfig>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let deca = match deca {
            Some(cfg) => {
                let layers = cmwe_layers_for(&cfg, extent);
                if layers < 2 {
                    return Err(Error::TooSmall {
                        op: "deca (pyramid level)",
                        h: extent,
                        w: extent,
                        min: 4,
                    });
                }
                let scaled = DecaConfig {
                    cmwe_layers: layers,
                    ..cfg
                };
                Some(Deca::new(store, &format!("{name}.deca"), channels, scaled, rng)?)
            }
            None => None,
        };
        let depa = match depa {
            Some(cfg) => Some(Depa::new(store, &format!("{name}.depa"), channels, cfg, rng)?),
            None => None,
        };
        Ok(Self { deca, depa })
    }

    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_v: &Tensor4<T>,
        f_ir: &Tensor4<T>,
    ) -> Result<(Tensor4<T>, ScaleFusionCache<T>)> {
        f_v.expect_same_shape("fuse_pyramids", f_ir)?;
        let (v1, ir1, deca_cache) = match &self.deca {
            Some(d) => {
                let (v1, ir1, c) = d.forward(store, f_v, f_ir)?;
                (v1, ir1, Some(c))
            }
            None => (f_v.clone(), f_ir.clone(), None),
        };
        let (out, depa_cache) = match &self.depa {
            Some(d) => {
                let (out, c) = d.forward(store, &v1, &ir1)?;
                (out, Some(c))
            }
            None => (v1.add(&ir1)?, None),
        };
        Ok((
            out,
            ScaleFusionCache {
                deca: deca_cache,
                depa: depa_cache,
            },
        ))
    }

    /// Returns gradients for `(f_v, f_ir)`.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ScaleFusionCache<T>,
        grad: &Tensor4<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor4<T>, Tensor4<T>)> {
        let (g_v1, g_ir1) = match (&self.depa, &cache.depa) {
            (Some(d), Some(c)) => d.backward(store, c, grad, grads)?,
            _ => (grad.clone(), grad.clone()),
        };
        match (&self.deca, &cache.deca) {
            (Some(d), Some(c)) => d.backward(store, c, &g_v1, &g_ir1, grads),
            _ => Ok((g_v1, g_ir1)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squeeze_depth_capped_by_extent() {
        let cfg = DecaConfig::default();
        assert_eq!(cmwe_layers_for(&cfg, 16), 3);
        assert_eq!(cmwe_layers_for(&cfg, 8), 3);
        assert_eq!(cmwe_layers_for(&cfg, 4), 2);
        assert_eq!(cmwe_layers_for(&cfg, 2), 1);
    }

    #[test]
    fn plain_addition_without_blocks() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(1);
        let f = ScaleFusion::new(&mut store, "f", 4, 8, None, None, &mut rng).unwrap();
        let a: Tensor4<f64> = rng.normal_tensor((2, 4, 8, 8), 1.0);
        let b: Tensor4<f64> = rng.normal_tensor((2, 4, 8, 8), 1.0);
        let (out, _) = f.forward(&store, &a, &b).unwrap();
        assert!(out.bit_eq(&a.add(&b).unwrap()));
    }
}
