//! Desk-scale dual-stream detector: one backbone per modality, per-scale fusion,
//! a dense head per pyramid level, plus training and checkpointing.

pub mod backbone;
pub mod checkpoint;
pub mod decode;
pub mod fusion;
pub mod head;
pub mod loss;
pub mod targets;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::deca::DecaConfig;
use crate::depa::DepaConfig;
use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor4};

use backbone::{Backbone, BackboneCache, Pyramid, STRIDES};
use fusion::{ScaleFusion, ScaleFusionCache};
use head::{ScaleHead, ScaleHeadCache};
use targets::Grid;

pub use checkpoint::Checkpoint;
pub use decode::DecodeConfig;
pub use loss::LossBreakdown;
pub use train::{EpochLog, TrainConfig, Trainer};

/// Which input streams the detector reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visible,
    Infrared,
    #[default]
    Cross,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(Self::Visible),
            "infrared" => Ok(Self::Infrared),
            "cross" => Ok(Self::Cross),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality `{other}` (expected visible, infrared or cross)"
            ))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Visible => "visible",
            Self::Infrared => "infrared",
            Self::Cross => "cross",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub width: usize,
    pub num_classes: usize,
    pub modality: Modality,
    pub use_deca: bool,
    pub use_depa: bool,
    pub use_focus: bool,
    pub deca: DecaConfig,
    pub depa: DepaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            width: 16,
            num_classes: crate::synth::NUM_CLASSES,
            modality: Modality::Cross,
            use_deca: true,
            use_depa: true,
            use_focus: true,
            deca: DecaConfig::default(),
            depa: DepaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be positive".into()));
        }
        if self.modality == Modality::Cross {
            if self.use_deca {
                for c in self.pyramid_channels() {
                    self.deca.validate(c)?;
                }
            }
            if self.use_depa {
                self.depa.validate()?;
            }
        }
        Ok(())
    }

    pub fn pyramid_channels(&self) -> [usize; 3] {
        [self.width, 2 * self.width, 4 * self.width]
    }

    pub fn grids(&self) -> [Grid; 3] {
        STRIDES.map(|s| Grid {
            rows: self.image_size / s,
            cols: self.image_size / s,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone_v: Option<Backbone>,
    pub backbone_ir: Option<Backbone>,
    pub fusion: Vec<ScaleFusion>,
    pub heads: Vec<ScaleHead>,
}

pub struct DetectorCache<T> {
    backbone_v: Option<BackboneCache<T>>,
    backbone_ir: Option<BackboneCache<T>>,
    fusion: Vec<ScaleFusionCache<T>>,
    heads: Vec<ScaleHeadCache<T>>,
}

impl Detector {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let reads_v = cfg.modality != Modality::Infrared;
        let reads_ir = cfg.modality != Modality::Visible;
        let backbone_v = if reads_v {
            Some(Backbone::new(store, "visible", cfg.width, cfg.use_focus, rng)?)
        } else {
            None
        };
        let backbone_ir = if reads_ir {
            Some(Backbone::new(store, "infrared", cfg.width, cfg.use_focus, rng)?)
        } else {
            None
        };
        let channels = cfg.pyramid_channels();
        let grids = cfg.grids();
        let mut fusion = Vec::new();
        if cfg.modality == Modality::Cross {
            for i in 0..3 {
                fusion.push(ScaleFusion::new(
                    store,
                    &format!("fuse.p{}", i + 3),
                    channels[i],
                    grids[i].rows.min(grids[i].cols),
                    cfg.use_deca.then_some(cfg.deca),
                    cfg.use_depa.then_some(cfg.depa),
                    rng,
                )?);
            }
        }
        let heads = (0..3)
            .map(|i| ScaleHead::new(store, &format!("head.p{}", i + 3), channels[i], cfg.width, cfg.num_classes, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            backbone_v,
            backbone_ir,
            fusion,
            heads,
        })
    }

    /// Fused (or single-stream) pyramid.
    pub fn features<T: Real>(
        &self,
        store: &ParamStore<T>,
        visible: &Tensor4<T>,
        infrared: &Tensor4<T>,
    ) -> Result<(Pyramid<T>, DetectorCache<T>)> {
        let mut cache = DetectorCache {
            backbone_v: None,
            backbone_ir: None,
            fusion: Vec::new(),
            heads: Vec::new(),
        };
        let pyr_v = match &self.backbone_v {
            Some(bb) => {
                let (p, c) = bb.forward(store, visible)?;
                cache.backbone_v = Some(c);
                Some(p)
            }
            None => None,
        };
        let pyr_ir = match &self.backbone_ir {
            Some(bb) => {
                let (p, c) = bb.forward(store, infrared)?;
                cache.backbone_ir = Some(c);
                Some(p)
            }
            None => None,
        };
        let fused = match (pyr_v, pyr_ir) {
            (Some(v), Some(ir)) => {
                let mut out = Vec::with_capacity(3);
                for (i, f) in self.fusion.iter().enumerate() {
                    let (y, c) = f.forward(store, &v[i], &ir[i])?;
                    out.push(y);
                    cache.fusion.push(c);
                }
                out.try_into().ok().expect("three scales")
            }
            (Some(p), None) | (None, Some(p)) => p,
            (None, None) => unreachable!("at least one backbone is built"),
        };
        Ok((fused, cache))
    }

    /// Raw predictions per scale, `b x (5 + K) x h x w`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        visible: &Tensor4<T>,
        infrared: &Tensor4<T>,
    ) -> Result<(Vec<Tensor4<T>>, DetectorCache<T>)> {
        let (fused, mut cache) = self.features(store, visible, infrared)?;
        let mut preds = Vec::with_capacity(3);
        for (head, x) in self.heads.iter().zip(&fused) {
            let (p, c) = head.forward(store, x)?;
            preds.push(p);
            cache.heads.push(c);
        }
        Ok((preds, cache))
    }

    pub fn predict<T: Real>(
        &self,
        store: &ParamStore<T>,
        visible: &Tensor4<T>,
        infrared: &Tensor4<T>,
    ) -> Result<Vec<Tensor4<T>>> {
        self.forward(store, visible, infrared).map(|(p, _)| p)
    }

    /// Accumulates parameter gradients; returns `(visible, infrared)` image
    /// gradients, `None` for a stream the model does not read.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &DetectorCache<T>,
        grad_preds: &[Tensor4<T>],
        grads: &mut Grads<T>,
    ) -> Result<(Option<Tensor4<T>>, Option<Tensor4<T>>)> {
        let g_fused: Vec<Tensor4<T>> = self
            .heads
            .iter()
            .zip(&cache.heads)
            .zip(grad_preds)
            .map(|((h, c), g)| h.backward(store, c, g, grads))
            .collect::<Result<_>>()?;
        let (g_v, g_ir): (Option<Pyramid<T>>, Option<Pyramid<T>>) = match self.cfg.modality {
            Modality::Cross => {
                let mut gv = Vec::with_capacity(3);
                let mut gir = Vec::with_capacity(3);
                for ((f, c), g) in self.fusion.iter().zip(&cache.fusion).zip(&g_fused) {
                    let (a, b) = f.backward(store, c, g, grads)?;
                    gv.push(a);
                    gir.push(b);
                }
                (gv.try_into().ok(), gir.try_into().ok())
            }
            Modality::Visible => (g_fused.try_into().ok(), None),
            Modality::Infrared => (None, g_fused.try_into().ok()),
        };
        let img_v = match (&self.backbone_v, &cache.backbone_v, g_v) {
            (Some(bb), Some(c), Some(g)) => Some(bb.backward(store, c, &g, grads)?),
            _ => None,
        };
        let img_ir = match (&self.backbone_ir, &cache.backbone_ir, g_ir) {
            (Some(bb), Some(c), Some(g)) => Some(bb.backward(store, c, &g, grads)?),
            _ => None,
        };
        Ok((img_v, img_ir))
    }
}
