//! Deterministic SGD training with a cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, Detection, EvalReport, GtBox};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::synth::{Label, PairedSample};
use crate::tensor::Tensor4;

use super::decode::{decode, DecodeConfig};
use super::loss::{detection_loss, LossBreakdown};
use super::targets::assign_targets;
use super::{Detector, ModelConfig};

/// Sub-stream of the seed used for per-epoch shuffling and flips.
const DATA_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random horizontal flips of the image pair.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            seed: 0,
            epochs: 60,
            batch: 8,
            lr_init: 1e-2,
            lr_final: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be positive".into()));
        }
        if !(self.lr_final <= self.lr_init && self.lr_final >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= lr_final <= lr_init, got lr_init {} and lr_final {}",
                self.lr_init, self.lr_final
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1) and weight_decay be >= 0".into()));
        }
        Ok(())
    }

    /// Cosine interpolation from `lr_init` at step 0 to `lr_final` at the last step.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let t = if total_steps > 1 {
            step as f64 / (total_steps - 1) as f64
        } else {
            0.0
        };
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub val_map50: Option<f64>,
}

/// Images converted to tensors once, up front.
pub struct PreparedSet {
    pub ids: Vec<u64>,
    pub visible: Vec<Tensor4<f32>>,
    pub infrared: Vec<Tensor4<f32>>,
    pub labels: Vec<Vec<Label>>,
}

impl PreparedSet {
    pub fn new(samples: &[PairedSample], image_size: usize) -> Result<Self> {
        for s in samples {
            for img in [&s.visible, &s.infrared] {
                if img.width != image_size || img.height != image_size {
                    return Err(Error::InvalidArgument(format!(
                        "sample {:06} is {}x{}, model expects {image_size}x{image_size}",
                        s.id, img.width, img.height
                    )));
                }
            }
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            visible: samples.iter().map(|s| s.visible.to_tensor()).collect(),
            infrared: samples.iter().map(|s| s.infrared.to_tensor()).collect(),
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ground_truth(&self) -> Vec<GtBox> {
        self.ids
            .iter()
            .zip(&self.labels)
            .flat_map(|(&image_id, labels)| {
                labels.iter().map(move |l| GtBox {
                    image_id,
                    class: l.class,
                    bbox: l.bbox,
                })
            })
            .collect()
    }
}

fn flip_tensor(t: &Tensor4<f32>) -> Tensor4<f32> {
    let mut out = t.clone();
    let w = t.shape().w;
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn flip_labels(labels: &[Label]) -> Vec<Label> {
    labels
        .iter()
        .map(|l| Label {
            class: l.class,
            bbox: metrics::BBox::new(1.0 - l.bbox.x2, l.bbox.y1, 1.0 - l.bbox.x1, l.bbox.y2),
        })
        .collect()
}

/// Model, parameters and optimiser state.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub detector: Detector,
    pub store: ParamStore<f32>,
    pub velocity: Vec<Tensor4<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let detector = Detector::new(&mut store, cfg.model, &mut SeededRng::new(cfg.seed))?;
        let velocity = store.iter().map(|(_, p)| Tensor4::zeros(p.value.shape())).collect();
        Ok(Self {
            cfg,
            detector,
            store,
            velocity,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch)
    }

    /// Visit order and flip decisions for `epoch` (0-based); a pure function of
    /// the seed so resumed runs see the same batches.
    pub fn epoch_plan(&self, epoch: usize, n: usize) -> Vec<(usize, bool)> {
        let mut rng = SeededRng::new(self.cfg.seed).fork(DATA_STREAM + epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        order
            .into_iter()
            .map(|i| (i, self.cfg.flip && rng.chance(0.5)))
            .collect()
    }

    /// One pass over `data`. Returns the mean loss.
    pub fn train_epoch(&mut self, data: &PreparedSet) -> Result<(LossBreakdown, f64)> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let steps = self.steps_per_epoch(data.len());
        let total_steps = steps * self.cfg.epochs.max(self.epoch + 1);
        let plan = self.epoch_plan(self.epoch, data.len());
        let (mut obj, mut cls, mut bx) = (0.0, 0.0, 0.0);
        let mut lr = self.cfg.lr_init;
        for (step, chunk) in plan.chunks(self.cfg.batch).enumerate() {
            let mut vis = Vec::with_capacity(chunk.len());
            let mut ir = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &(i, flip) in chunk {
                let labels = if flip {
                    vis.push(flip_tensor(&data.visible[i]));
                    ir.push(flip_tensor(&data.infrared[i]));
                    flip_labels(&data.labels[i])
                } else {
                    vis.push(data.visible[i].clone());
                    ir.push(data.infrared[i].clone());
                    data.labels[i].clone()
                };
                targets.push(assign_targets(&labels, &self.cfg.model.grids(), self.cfg.model.image_size)?);
            }
            let vis = Tensor4::stack(&vis)?;
            let ir = Tensor4::stack(&ir)?;
            let (preds, cache) = self.detector.forward(&self.store, &vis, &ir)?;
            let (loss, grad_preds) = detection_loss(&preds, &targets, self.cfg.model.num_classes)?;
            if let Some(term) = loss.non_finite_term() {
                return Err(Error::NonFiniteLoss {
                    term,
                    epoch: self.epoch + 1,
                    step: step + 1,
                });
            }
            let mut grads = self.store.grad_buffer();
            self.detector.backward(&self.store, &cache, &grad_preds, &mut grads)?;
            lr = self.cfg.lr_at(self.epoch * steps + step, total_steps);
            self.sgd_step(&grads, lr);
            obj += loss.objectness;
            cls += loss.classification;
            bx += loss.box_iou;
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok((LossBreakdown::from_terms(obj / n, cls / n, bx / n), lr))
    }

    fn sgd_step(&mut self, grads: &crate::params::Grads<f32>, lr: f64) {
        let mu = self.cfg.momentum as f32;
        let wd = self.cfg.weight_decay as f32;
        let lr = lr as f32;
        for ((param, v), g) in self.store.iter_mut().zip(&mut self.velocity).zip(grads.iter()) {
            let decay = if param.name.ends_with(".weight") { wd } else { 0.0 };
            for ((w, v), &g) in param.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g + decay * *w;
                *w -= lr * *v;
            }
        }
    }

    /// Decoded detections on `data`, batched.
    pub fn detect(&self, data: &PreparedSet, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
        let mut dets = Vec::new();
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(self.cfg.batch) {
            let vis = Tensor4::stack(&chunk.iter().map(|&i| data.visible[i].clone()).collect::<Vec<_>>())?;
            let ir = Tensor4::stack(&chunk.iter().map(|&i| data.infrared[i].clone()).collect::<Vec<_>>())?;
            let preds = self.detector.predict(&self.store, &vis, &ir)?;
            let ids: Vec<u64> = chunk.iter().map(|&i| data.ids[i]).collect();
            dets.extend(decode(&preds, &ids, self.cfg.model.num_classes, cfg).into_iter().flatten());
        }
        Ok(dets)
    }

    pub fn evaluate(&self, data: &PreparedSet) -> Result<EvalReport> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("evaluation split is empty".into()));
        }
        let dets = self.detect(data, &DecodeConfig::EVAL)?;
        metrics::evaluate(&dets, &data.ground_truth(), data.len())
    }

    /// Trains until `cfg.epochs` epochs are complete, calling `on_epoch` after each.
    pub fn run(
        &mut self,
        train: &PreparedSet,
        val: Option<&PreparedSet>,
        mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        while self.epoch < self.cfg.epochs {
            let (loss, lr) = self.train_epoch(train)?;
            let val_map50 = match val {
                Some(v) if !v.is_empty() => Some(self.evaluate(v)?.map50),
                _ => None,
            };
            let entry = EpochLog {
                epoch: self.epoch,
                lr,
                loss,
                val_map50,
            };
            self.log.push(entry.clone());
            on_epoch(self, &entry)?;
        }
        Ok(())
    }
}
