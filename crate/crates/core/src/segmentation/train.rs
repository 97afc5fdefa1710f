use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{forward_on_tape, instances_from_prediction, loss_on_tape, seg_forward, LossParts, Pyramid, SegModel};
use crate::cloud::{augment, crop_box, AugmentConfig, ColoredCloud, SceneAnnotation};
use crate::metrics::PanopticAccumulator;
use crate::nn::{adam_step, AdamState, CeInput, Mode, Tape};
use crate::rng::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub lovasz: f64,
    pub offset: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 2.0,
            lovasz: 10.0,
            offset: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.ce, self.lovasz, self.offset].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay: f64,
    pub weights: LossWeights,
    /// Optimizer steps per scene and epoch, each on its own crop.
    pub crops_per_scene: usize,
    /// Width of the slab crop along the row; `None` trains on whole scenes.
    pub crop_width: Option<f64>,
    pub augment: bool,
    /// Validation interval in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    pub iou_threshold: f64,
    /// Stop after the first evaluation whose fruit PQ reaches this value.
    pub stop_at_pq: Option<f64>,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 200,
            lr: 0.01,
            lr_decay: 0.97,
            weights: LossWeights::default(),
            crops_per_scene: 1,
            crop_width: None,
            augment: true,
            eval_every: 10,
            iou_threshold: 0.5,
            stop_at_pq: None,
            seed: 0,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr must be positive and lr_decay in (0, 1]".into()));
        }
        if self.crops_per_scene == 0 || self.eval_every == 0 {
            return Err(Error::Config("crops_per_scene and eval_every must be at least 1".into()));
        }
        if matches!(self.crop_width, Some(w) if !(w > 0.0)) {
            return Err(Error::Config("crop_width must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate used during epoch `epoch` (zero-based).
pub fn learning_rate(config: &SegTrainConfig, epoch: usize) -> f64 {
    config.lr * config.lr_decay.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Loss parts averaged over the epoch's steps.
    pub loss: LossParts,
    /// Fruit PQ on the validation scenes, when evaluated.
    pub val_pq: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedSegmentation {
    pub model: SegModel,
    pub best_epoch: Option<usize>,
    pub best_val_pq: Option<f64>,
    pub logs: Vec<EpochLog>,
}

fn fruit_pq(model: &SegModel, scenes: &[(ColoredCloud, SceneAnnotation)], iou_threshold: f64) -> Result<f64> {
    let mut acc = PanopticAccumulator::new();
    for (cloud, gt) in scenes {
        let pred = super::segment(cloud, model)?;
        acc.add(&pred, gt, iou_threshold)?;
    }
    Ok(acc.report().fruit.pq)
}

/// Adam on the instance loss with per-epoch decay. Returns the model with the
/// best validation fruit PQ (earliest on ties), or the final model when no
/// validation scenes are given.
pub fn train_segmentation(
    model: SegModel,
    train: &[(ColoredCloud, SceneAnnotation)],
    validation: &[(ColoredCloud, SceneAnnotation)],
    config: &SegTrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainedSegmentation> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("no training scenes".into()));
    }
    let mut model = model;
    let mut adam = AdamState::new();
    let mut rng = stream(config.seed, "seg-train");
    let mut best: Option<(f64, usize, SegModel)> = None;
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = learning_rate(config, epoch);
        let mut sum = LossParts::default();
        let mut steps = 0usize;
        for (scene_idx, (cloud, gt)) in train.iter().enumerate() {
            for _ in 0..config.crops_per_scene {
                let (mut c, mut a) = match config.crop_width {
                    Some(w) => {
                        let pick = rng.gen_range(0..cloud.len());
                        crop_box(cloud, gt, cloud.points[pick], w)
                    }
                    None => (cloud.clone(), gt.clone()),
                };
                if config.augment {
                    (c, a) = augment(&c, &a, &AugmentConfig::segmentation_training(rng.gen()))?;
                }
                if c.len() < 2 {
                    continue;
                }
                let pyramid = Pyramid::build(&c, &model.config)?;
                let mut tape = Tape::new();
                let vars = forward_on_tape(&mut tape, &model, &pyramid, Mode::Train)?;
                let lv = loss_on_tape(
                    &mut tape,
                    vars.logits,
                    CeInput::Logits,
                    vars.offsets,
                    &c.points,
                    &a,
                    &config.weights,
                )?;
                if !lv.parts.total.is_finite() {
                    return Err(Error::Divergence(format!(
                        "segmentation loss is {} at epoch {epoch}, scene {scene_idx}",
                        lv.parts.total
                    )));
                }
                let grads = tape.backward(lv.total);
                let updates = tape.take_buffer_updates();
                adam_step(&mut model.params, &grads.params, &mut adam, lr);
                model.params.apply_buffer_updates(&updates);
                if !model.params.is_finite() {
                    return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
                }
                sum.total += lv.parts.total;
                sum.ce += lv.parts.ce;
                sum.lovasz += lv.parts.lovasz;
                sum.offset += lv.parts.offset;
                steps += 1;
            }
        }
        let inv = 1.0 / steps.max(1) as f64;
        let loss = LossParts {
            total: sum.total * inv,
            ce: sum.ce * inv,
            lovasz: sum.lovasz * inv,
            offset: sum.offset * inv,
        };
        let evaluate = !validation.is_empty() && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
        let val_pq = if evaluate {
            Some(fruit_pq(&model, validation, config.iou_threshold)?)
        } else {
            None
        };
        if let Some(pq) = val_pq {
            if best.as_ref().map_or(true, |b| pq > b.0) {
                best = Some((pq, epoch, model.clone()));
            }
        }
        let log = EpochLog { epoch, lr, loss, val_pq };
        on_epoch(&log);
        logs.push(log);
        if matches!((val_pq, config.stop_at_pq), (Some(pq), Some(goal)) if pq >= goal) {
            break;
        }
    }
    Ok(match best {
        Some((pq, epoch, m)) => TrainedSegmentation {
            model: m,
            best_epoch: Some(epoch),
            best_val_pq: Some(pq),
            logs,
        },
        None => TrainedSegmentation {
            model,
            best_epoch: None,
            best_val_pq: None,
            logs,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandwidthSweep {
    pub best: f64,
    /// `(bandwidth, fruit PQ)` per candidate, in the given order.
    pub table: Vec<(f64, f64)>,
}

/// Picks the bandwidth with the highest validation fruit PQ, preferring the
/// smaller bandwidth on ties.
pub fn tune_bandwidth(
    model: &SegModel,
    validation: &[(ColoredCloud, SceneAnnotation)],
    candidates: &[f64],
    iou_threshold: f64,
) -> Result<BandwidthSweep> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no bandwidth candidates".into()));
    }
    let preds = validation
        .iter()
        .map(|(c, _)| seg_forward(c, model))
        .collect::<Result<Vec<_>>>()?;
    let mut table = Vec::with_capacity(candidates.len());
    for &bw in candidates {
        let mut acc = PanopticAccumulator::new();
        for ((cloud, gt), pred) in validation.iter().zip(&preds) {
            let inst = instances_from_prediction(cloud, pred, bw, model.config.min_points)?;
            acc.add(&inst, gt, iou_threshold)?;
        }
        table.push((bw, acc.report().fruit.pq));
    }
    let best = table
        .iter()
        .copied()
        .reduce(|a, b| {
            if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) {
                b
            } else {
                a
            }
        })
        .map(|(bw, _)| bw)
        .unwrap();
    Ok(BandwidthSweep { best, table })
}
