use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{batch_match, greedy_assign, logits_on_tape, loss_on_tape, MatcherModel};
use crate::cloud::{augment, AugmentConfig, ColoredCloud, SceneAnnotation};
use crate::encoder::{encode_all, encode_on_tape, supports_for, EncoderModel};
use crate::metrics::{f1_scores, matching_confusion, MatchConfusion};
use crate::nn::{adam_step, AdamState, Matrix, Mode, Tape};
use crate::rng::stream;
use crate::synth::{corrupt_boundaries, ScenePair};
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchTrainConfig {
    /// Each epoch takes one optimizer step per training pair.
    pub epochs: usize,
    pub lr: f64,
    pub lambda_inj: f64,
    pub augment: bool,
    /// When positive, every step moves a random share of up to this fraction
    /// of each fruit's points across its boundary, imitating segmentation
    /// errors at inference.
    pub boundary_noise: f64,
    /// Evaluation interval in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Stop after the first evaluation whose training mF1 reaches this value.
    pub stop_at_train_mf1: Option<f64>,
    pub seed: u64,
}

impl Default for MatchTrainConfig {
    fn default() -> Self {
        MatchTrainConfig {
            epochs: 100,
            lr: 3e-4,
            lambda_inj: 0.08,
            augment: true,
            boundary_noise: 0.0,
            eval_every: 5,
            stop_at_train_mf1: None,
            seed: 0,
        }
    }
}

impl MatchTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.boundary_noise) {
            return Err(Error::Config("boundary_noise must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) || !(self.lambda_inj >= 0.0) {
            return Err(Error::Config("lr must be positive and lambda_inj nonnegative".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchEpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total, cross-entropy and injectivity loss over the epoch's steps.
    pub loss: f64,
    pub ce: f64,
    pub injectivity: f64,
    pub train_mf1: Option<f64>,
    pub val_mf1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedMatcher {
    pub encoder: EncoderModel,
    pub matcher: MatcherModel,
    pub best_epoch: Option<usize>,
    pub best_val_mf1: Option<f64>,
    pub logs: Vec<MatchEpochLog>,
}

fn centers(ann: &SceneAnnotation) -> Vec<Vec3> {
    ann.instances.iter().map(|f| f.center).collect()
}

/// Summed matching confusion over pairs, matching ground-truth instances.
pub fn evaluate_pairs(encoder: &EncoderModel, matcher: &MatcherModel, pairs: &[ScenePair]) -> Result<MatchConfusion> {
    let mut total = MatchConfusion::default();
    for pair in pairs {
        let (ct, at) = &pair.current;
        let (cp, ap) = &pair.prev;
        let dt = encode_all(ct, &at.instances, encoder, "t")?;
        let dp = encode_all(cp, &ap.instances, encoder, "t-1")?;
        let rows = |s: crate::encoder::DescriptorSet| s.descriptors.into_iter().map(|d| d.0).collect::<Vec<_>>();
        let h = batch_match(&rows(dt), &rows(dp), &centers(at), &centers(ap), matcher)?;
        total.add(&matching_confusion(&greedy_assign(&h), &pair.association)?);
    }
    Ok(total)
}

fn mf1(encoder: &EncoderModel, matcher: &MatcherModel, pairs: &[ScenePair]) -> Result<f64> {
    Ok(f1_scores(&evaluate_pairs(encoder, matcher, pairs)?).mf1)
}

fn prepared_supports(
    cloud: &ColoredCloud,
    ann: &SceneAnnotation,
    encoder: &EncoderModel,
    config: &MatchTrainConfig,
    rng: &mut crate::rng::Rng,
) -> Result<Vec<ColoredCloud>> {
    let mut supports = supports_for(cloud, &ann.instances, &encoder.config);
    if config.augment {
        for s in supports.iter_mut().filter(|s| !s.is_empty()) {
            let bg = SceneAnnotation::all_background(s.len());
            *s = augment(s, &bg, &AugmentConfig::matcher_training(rng.gen()))?.0;
        }
    }
    Ok(supports)
}

/// Trains encoder and matcher jointly with Adam at a fixed learning rate on
/// ground-truth instances. Returns the models with the best validation mF1
/// (earliest on ties), or the final models without validation pairs.
pub fn train_matcher(
    encoder: EncoderModel,
    matcher: MatcherModel,
    train: &[ScenePair],
    validation: &[ScenePair],
    config: &MatchTrainConfig,
    mut on_epoch: impl FnMut(&MatchEpochLog),
) -> Result<TrainedMatcher> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("no training pairs".into()));
    }
    let z = encoder.config.descriptor_len();
    if z != matcher.descriptor_len {
        return Err(Error::Shape(format!(
            "encoder produces {z} values, matcher expects {}",
            matcher.descriptor_len
        )));
    }
    let (mut encoder, mut matcher) = (encoder, matcher);
    let mut adam_enc = AdamState::new();
    let mut adam_match = AdamState::new();
    let mut rng = stream(config.seed, "match-train");
    let mut best: Option<(f64, usize, EncoderModel, MatcherModel)> = None;
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut loss, mut ce, mut inj, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for (pair_idx, pair) in train.iter().enumerate() {
            let (ct, at) = &pair.current;
            let (cp, ap) = &pair.prev;
            let (a, b) = (at.instances.len(), ap.instances.len());
            if a == 0 {
                continue;
            }
            let noisy;
            let (at, ap) = if config.boundary_noise > 0.0 {
                let mut corrupt = |c: &ColoredCloud, ann: &SceneAnnotation| {
                    let f = rng.gen_range(0.0..config.boundary_noise);
                    corrupt_boundaries(c, ann, f, rng.gen())
                };
                noisy = (corrupt(ct, at)?, corrupt(cp, ap)?);
                (&noisy.0, &noisy.1)
            } else {
                (at, ap)
            };
            let mut supports = prepared_supports(ct, at, &encoder, config, &mut rng)?;
            supports.extend(prepared_supports(cp, ap, &encoder, config, &mut rng)?);
            let refs: Vec<&ColoredCloud> = supports.iter().collect();
            let mut tape = Tape::new();
            let d = encode_on_tape(&mut tape, &encoder, &refs, Mode::Train)?;
            let d_t = tape.slice_rows(d, 0, a);
            let d_prev = if b == 0 {
                tape.leaf(Matrix::zeros(0, z))
            } else {
                tape.slice_rows(d, a, b)
            };
            let logits = logits_on_tape(&mut tape, &matcher, d_t, d_prev, &centers(at), &centers(ap), Mode::Train)?;
            let lv = loss_on_tape(&mut tape, logits, &pair.association, config.lambda_inj)?;
            let total = tape.scalar(lv.total);
            if !total.is_finite() {
                return Err(Error::Divergence(format!(
                    "matching loss is {total} at epoch {epoch}, pair {pair_idx}"
                )));
            }
            let grads = tape.backward(lv.total);
            let updates = tape.take_buffer_updates();
            adam_step(&mut encoder.params, &grads.params, &mut adam_enc, config.lr);
            adam_step(&mut matcher.params, &grads.params, &mut adam_match, config.lr);
            encoder.params.apply_buffer_updates(&updates);
            matcher.params.apply_buffer_updates(&updates);
            if !encoder.params.is_finite() || !matcher.params.is_finite() {
                return Err(Error::Divergence(format!("non-finite parameters after epoch {epoch}")));
            }
            loss += total;
            ce += lv.ce;
            inj += lv.injectivity;
            steps += 1;
        }
        let inv = 1.0 / steps.max(1) as f64;
        let evaluate = (epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs;
        let train_mf1 = if evaluate { Some(mf1(&encoder, &matcher, train)?) } else { None };
        let val_mf1 = if evaluate && !validation.is_empty() {
            Some(mf1(&encoder, &matcher, validation)?)
        } else {
            None
        };
        if let Some(v) = val_mf1 {
            if best.as_ref().map_or(true, |b| v > b.0) {
                best = Some((v, epoch, encoder.clone(), matcher.clone()));
            }
        }
        let log = MatchEpochLog {
            epoch,
            lr: config.lr,
            loss: loss * inv,
            ce: ce * inv,
            injectivity: inj * inv,
            train_mf1,
            val_mf1,
        };
        on_epoch(&log);
        logs.push(log);
        if matches!((train_mf1, config.stop_at_train_mf1), (Some(m), Some(goal)) if m >= goal) {
            break;
        }
    }
    Ok(match best {
        Some((v, epoch, encoder, matcher)) => TrainedMatcher {
            encoder,
            matcher,
            best_epoch: Some(epoch),
            best_val_mf1: Some(v),
            logs,
        },
        None => TrainedMatcher {
            encoder,
            matcher,
            best_epoch: None,
            best_val_mf1: None,
            logs,
        },
    })
}
