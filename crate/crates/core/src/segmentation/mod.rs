//! Fruit instance segmentation: a sparse U-Net predicts per-point semantics
//! and offsets towards the fruit center, shifted fruit points are clustered
//! with mean shift and the clusters become instances.

mod cluster;
mod train;

use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

pub use cluster::{
    assemble_instances, mean_shift, shift_points, ClusterResult, ShiftedPoints, DEFAULT_MIN_POINTS,
    FRUIT_THRESHOLD, MAX_ITERATIONS,
};
pub use train::{
    learning_rate, train_segmentation, tune_bandwidth, BandwidthSweep, EpochLog, LossWeights,
    SegTrainConfig, TrainedSegmentation,
};

use crate::cloud::{ColoredCloud, SceneAnnotation, Semantic};
use crate::nn::{
    batch_norm, cross_entropy, init_batch_norm, init_linear, init_sparse_conv, linear, load_checkpoint,
    lovasz_softmax, masked_l1, save_checkpoint, sparse_conv, CeInput, Matrix, Mode, ParamStore, Tape, Var,
};
use crate::rng::stream;
use crate::sparsegrid::{downsample_coords, kernel_neighbors, voxelize, Rulebook, VoxelCoord};
use crate::{sub3, Error, Result, Vec3};

pub const CHECKPOINT_KIND: &str = "segmentation";
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegNetConfig {
    pub voxel_size: f64,
    /// Channels per resolution level, finest first.
    pub encoder_channels: Vec<usize>,
    /// Channels per decoder level, coarsest first; one fewer than the encoder.
    pub decoder_channels: Vec<usize>,
    pub num_classes: usize,
    pub offset_dim: usize,
    pub bandwidth: f64,
    /// Raw offset-head outputs are multiplied by this (meters).
    pub offset_scale: f64,
    pub min_points: usize,
    pub rng_seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            voxel_size: 0.002,
            encoder_channels: vec![8, 16, 32, 64],
            decoder_channels: vec![32, 16, 8],
            num_classes: 2,
            offset_dim: 3,
            bandwidth: 0.01125,
            offset_scale: 0.01,
            min_points: DEFAULT_MIN_POINTS,
            rng_seed: 0,
        }
    }
}

/// RGB plus a constant occupancy channel.
pub const INPUT_CHANNELS: usize = 4;

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.voxel_size > 0.0) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return bad("encoder channel plan must be nonempty and positive".into());
        }
        if self.decoder_channels.len() + 1 != self.encoder_channels.len() || self.decoder_channels.contains(&0) {
            return bad(format!(
                "decoder needs {} positive channel counts",
                self.encoder_channels.len() - 1
            ));
        }
        if self.num_classes < 2 {
            return bad("at least two semantic classes are required".into());
        }
        if self.offset_dim != 3 {
            return bad(format!("offset head must be 3-dimensional, got {}", self.offset_dim));
        }
        if !(self.bandwidth > 0.0) || !(self.offset_scale > 0.0) {
            return bad("bandwidth and offset_scale must be positive".into());
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.encoder_channels.len()
    }

    fn head_channels(&self) -> usize {
        *self.decoder_channels.last().unwrap_or(&self.encoder_channels[0])
    }
}

/// Per-point class distribution and offset towards the instance center.
#[derive(Debug, Clone, PartialEq)]
pub struct SegPrediction {
    /// `N x num_classes`, rows sum to one; column 1 is fruit.
    pub probs: Matrix,
    pub offsets: Vec<Vec3>,
}

impl SegPrediction {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn fruit_probability(&self, i: usize) -> f64 {
        self.probs.get(i, 1)
    }

    /// The prediction a perfect model would make.
    pub fn from_ground_truth(cloud: &ColoredCloud, gt: &SceneAnnotation) -> Result<Self> {
        gt.validate(cloud.len())?;
        let mut probs = Matrix::zeros(cloud.len(), 2);
        let mut offsets = vec![[0.0; 3]; cloud.len()];
        for (i, s) in gt.per_point_semantic.iter().enumerate() {
            probs.set(i, usize::from(*s == Semantic::Fruit), 1.0);
        }
        for inst in &gt.instances {
            for &i in &inst.point_indices {
                offsets[i] = sub3(inst.center, cloud.points[i]);
            }
        }
        Ok(SegPrediction { probs, offsets })
    }

    fn offsets_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), 3, self.offsets.iter().flatten().copied().collect())
            .expect("three values per offset")
    }
}

/// Trained or freshly initialized segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: SegNetConfig,
    pub params: ParamStore,
}

impl SegModel {
    pub fn new(config: SegNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.rng_seed, "seg-init");
        let mut store = ParamStore::new();
        let enc = &config.encoder_channels;
        let c0 = enc[0];
        init_sparse_conv(&mut store, &mut rng, "stem.conv1", KERNEL, INPUT_CHANNELS, c0);
        init_batch_norm(&mut store, "stem.bn1", c0);
        init_sparse_conv(&mut store, &mut rng, "stem.conv2", KERNEL, c0, c0);
        init_batch_norm(&mut store, "stem.bn2", c0);
        for l in 1..enc.len() {
            init_sparse_conv(&mut store, &mut rng, &format!("down{l}.conv"), KERNEL, enc[l - 1], enc[l]);
            init_batch_norm(&mut store, &format!("down{l}.bn"), enc[l]);
            init_sparse_conv(&mut store, &mut rng, &format!("enc{l}.conv"), KERNEL, enc[l], enc[l]);
            init_batch_norm(&mut store, &format!("enc{l}.bn"), enc[l]);
        }
        let mut below = *enc.last().unwrap();
        for (d, &out) in config.decoder_channels.iter().enumerate() {
            let l = enc.len() - 2 - d;
            init_sparse_conv(&mut store, &mut rng, &format!("up{l}.conv"), KERNEL, below + enc[l], out);
            init_batch_norm(&mut store, &format!("up{l}.bn"), out);
            below = out;
        }
        init_linear(&mut store, &mut rng, "head.sem", config.head_channels(), config.num_classes);
        init_linear(&mut store, &mut rng, "head.offset", config.head_channels(), config.offset_dim);
        Ok(SegModel { config, params: store })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Shape(format!("expected a segmentation model, found {}", ck.kind)));
        }
        let config: SegNetConfig = serde_json::from_value(ck.config)?;
        let fresh = SegModel::new(config)?;
        fresh.params.check_layout(&ck.params)?;
        Ok(SegModel {
            config: fresh.config,
            params: ck.params,
        })
    }
}

/// Coordinates and rulebooks of every resolution level of one cloud.
pub(crate) struct Pyramid {
    point_to_voxel: Rc<Vec<usize>>,
    features: Matrix,
    /// Stride-1 rulebook per level.
    same: Vec<Rc<Rulebook>>,
    /// Stride-2 rulebook from level `l - 1` into level `l` (index `l - 1`).
    down: Vec<Rc<Rulebook>>,
    /// Row of the parent voxel one level up, per voxel of level `l`.
    parent: Vec<Rc<Vec<usize>>>,
}

impl Pyramid {
    pub(crate) fn build(cloud: &ColoredCloud, config: &SegNetConfig) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyInput("cannot segment an empty cloud".into()));
        }
        let (tensor, map) = voxelize(cloud, config.voxel_size);
        let mut features = Matrix::zeros(tensor.len(), INPUT_CHANNELS);
        for r in 0..tensor.len() {
            let row = features.row_mut(r);
            row[..3].copy_from_slice(tensor.features.row(r));
            row[3] = 1.0;
        }
        let mut coords: Vec<VoxelCoord> = tensor.coords;
        let mut stride = 1;
        let mut same = Vec::new();
        let mut down = Vec::new();
        let mut parent = Vec::new();
        for l in 0..config.levels() {
            if l > 0 {
                let (_, par) = downsample_coords(&coords, stride);
                let rb = kernel_neighbors(&coords, stride, KERNEL, 2);
                coords = rb.out_coords.clone();
                stride = rb.out_stride;
                parent.push(Rc::new(par));
                down.push(Rc::new(rb));
            }
            same.push(Rc::new(kernel_neighbors(&coords, stride, KERNEL, 1)));
        }
        Ok(Pyramid {
            point_to_voxel: Rc::new(map.point_to_voxel),
            features,
            same,
            down,
            parent,
        })
    }
}

/// Point-level outputs of one forward pass recorded on a tape.
pub(crate) struct ForwardVars {
    pub logits: Var,
    pub offsets: Var,
}

fn conv_bn_relu(
    tape: &mut Tape,
    store: &ParamStore,
    conv: &str,
    bn: &str,
    x: Var,
    rb: Rc<Rulebook>,
    mode: Mode,
) -> Result<Var> {
    let y = sparse_conv(tape, store, conv, x, rb)?;
    let y = batch_norm(tape, store, bn, y, mode)?;
    Ok(tape.relu(y))
}

pub(crate) fn forward_on_tape(
    tape: &mut Tape,
    model: &SegModel,
    pyramid: &Pyramid,
    mode: Mode,
) -> Result<ForwardVars> {
    let store = &model.params;
    let levels = model.config.levels();
    let x = tape.leaf(pyramid.features.clone());
    let h = conv_bn_relu(tape, store, "stem.conv1", "stem.bn1", x, pyramid.same[0].clone(), mode)?;
    let mut h = conv_bn_relu(tape, store, "stem.conv2", "stem.bn2", h, pyramid.same[0].clone(), mode)?;
    let mut skips = vec![h];
    for l in 1..levels {
        let d = conv_bn_relu(
            tape,
            store,
            &format!("down{l}.conv"),
            &format!("down{l}.bn"),
            h,
            pyramid.down[l - 1].clone(),
            mode,
        )?;
        h = conv_bn_relu(
            tape,
            store,
            &format!("enc{l}.conv"),
            &format!("enc{l}.bn"),
            d,
            pyramid.same[l].clone(),
            mode,
        )?;
        skips.push(h);
    }
    for l in (0..levels - 1).rev() {
        let up = tape.gather_rows(h, pyramid.parent[l].clone());
        let cat = tape.concat_cols(&[up, skips[l]])?;
        h = conv_bn_relu(
            tape,
            store,
            &format!("up{l}.conv"),
            &format!("up{l}.bn"),
            cat,
            pyramid.same[l].clone(),
            mode,
        )?;
    }
    let h = tape.gather_rows(h, pyramid.point_to_voxel.clone());
    let logits = linear(tape, store, "head.sem", h)?;
    let raw = linear(tape, store, "head.offset", h)?;
    let offsets = tape.scale(raw, model.config.offset_scale);
    Ok(ForwardVars { logits, offsets })
}

fn prediction_from_tape(tape: &mut Tape, vars: &ForwardVars) -> SegPrediction {
    let probs_var = tape.softmax_rows(vars.logits);
    let probs = tape.value(probs_var).clone();
    let off = tape.value(vars.offsets);
    let offsets = (0..off.rows).map(|r| [off.get(r, 0), off.get(r, 1), off.get(r, 2)]).collect();
    SegPrediction { probs, offsets }
}

/// Inference with running batch statistics.
pub fn seg_forward(cloud: &ColoredCloud, model: &SegModel) -> Result<SegPrediction> {
    let pyramid = Pyramid::build(cloud, &model.config)?;
    let mut tape = Tape::new();
    let vars = forward_on_tape(&mut tape, model, &pyramid, Mode::Eval)?;
    Ok(prediction_from_tape(&mut tape, &vars))
}

/// Turns a prediction into instances: shift, cluster, assemble.
pub fn instances_from_prediction(
    cloud: &ColoredCloud,
    pred: &SegPrediction,
    bandwidth: f64,
    min_points: usize,
) -> Result<SceneAnnotation> {
    let shifted = shift_points(cloud, pred)?;
    let clusters = mean_shift(&shifted.positions, bandwidth)?;
    assemble_instances(cloud, &shifted, &clusters, min_points)
}

/// Full inference pipeline with the model's own bandwidth and size filter.
pub fn segment(cloud: &ColoredCloud, model: &SegModel) -> Result<SceneAnnotation> {
    let pred = seg_forward(cloud, model)?;
    instances_from_prediction(cloud, &pred, model.config.bandwidth, model.config.min_points)
}

/// Value and parts of the instance-segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossParts {
    pub total: f64,
    /// Mean cross entropy per point, unweighted.
    pub ce: f64,
    pub lovasz: f64,
    pub offset: f64,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub parts: LossParts,
}

struct Targets {
    onehot: Matrix,
    labels: Vec<usize>,
    offsets: Matrix,
    mask: Vec<bool>,
}

fn targets(points: &[Vec3], gt: &SceneAnnotation, classes: usize) -> Result<Targets> {
    gt.validate(points.len())?;
    let n = points.len();
    let labels: Vec<usize> = gt
        .per_point_semantic
        .iter()
        .map(|s| usize::from(*s == Semantic::Fruit))
        .collect();
    let mut onehot = Matrix::zeros(n, classes);
    for (i, &l) in labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let mut offsets = Matrix::zeros(n, 3);
    let mut mask = vec![false; n];
    for inst in &gt.instances {
        for &i in &inst.point_indices {
            let d = sub3(inst.center, points[i]);
            offsets.row_mut(i).copy_from_slice(&d);
            mask[i] = true;
        }
    }
    Ok(Targets {
        onehot,
        labels,
        offsets,
        mask,
    })
}

/// `w_ce * mean CE + w_lov * Lovász + w_off * mean L1 offset error` over the
/// ground-truth fruit points; the offset term is zero without fruit points.
pub(crate) fn loss_on_tape(
    tape: &mut Tape,
    class_scores: Var,
    input: CeInput,
    offsets: Var,
    points: &[Vec3],
    gt: &SceneAnnotation,
    weights: &LossWeights,
) -> Result<LossVars> {
    weights.validate()?;
    let classes = tape.value(class_scores).cols;
    let n = points.len();
    if tape.value(class_scores).rows != n || tape.value(offsets).rows != n {
        return Err(Error::Shape("loss inputs are not aligned with the cloud".into()));
    }
    if n == 0 {
        return Err(Error::EmptyInput("loss on an empty cloud".into()));
    }
    let t = targets(points, gt, classes)?;
    let ce_sum = cross_entropy(tape, class_scores, &t.onehot, input)?;
    let probs = match input {
        CeInput::Logits => tape.softmax_rows(class_scores),
        CeInput::Probabilities => class_scores,
    };
    let lov = lovasz_softmax(tape, probs, &t.labels)?;
    let off = masked_l1(tape, offsets, &t.offsets, &t.mask)?;
    let parts = LossParts {
        total: 0.0,
        ce: tape.scalar(ce_sum) / n as f64,
        lovasz: tape.scalar(lov),
        offset: tape.scalar(off),
    };
    let a = tape.scale(ce_sum, weights.ce / n as f64);
    let b = tape.scale(lov, weights.lovasz);
    let c = tape.scale(off, weights.offset);
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    Ok(LossVars {
        total,
        parts: LossParts {
            total: tape.scalar(total),
            ..parts
        },
    })
}

/// Loss of a prediction with its gradients towards the class probabilities
/// and the offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct SegLoss {
    pub parts: LossParts,
    pub grad_probs: Matrix,
    pub grad_offsets: Matrix,
}

pub fn loss_ins(
    cloud: &ColoredCloud,
    pred: &SegPrediction,
    gt: &SceneAnnotation,
    weights: &LossWeights,
) -> Result<SegLoss> {
    let mut tape = Tape::new();
    let probs = tape.leaf(pred.probs.clone());
    let offsets = tape.leaf(pred.offsets_matrix());
    let lv = loss_on_tape(
        &mut tape,
        probs,
        CeInput::Probabilities,
        offsets,
        &cloud.points,
        gt,
        weights,
    )?;
    let g = tape.backward(lv.total);
    Ok(SegLoss {
        parts: lv.parts,
        grad_probs: g.of(probs).cloned().unwrap_or_else(|| Matrix::zeros(pred.len(), 2)),
        grad_offsets: g.of(offsets).cloned().unwrap_or_else(|| Matrix::zeros(pred.len(), 3)),
    })
}

#[cfg(test)]
mod tests;
