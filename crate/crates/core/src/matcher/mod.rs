//! Fruit re-identification: every fruit at time t attends over the fruits of
//! the previous session near it and predicts a distribution over those
//! candidates plus an explicit no-match outcome.

mod assign;
mod loss;
mod train;

use std::f64::consts::PI;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::cloud::{ColoredCloud, FruitInstance, TemporalAssociation};
use crate::encoder::{encode_all, EncoderModel};
use crate::nn::{
    batch_norm, encoder_layer, init_batch_norm, init_encoder_layer, init_linear, linear, load_checkpoint,
    save_checkpoint, softmax_in_place, Matrix, Mode, ParamStore, Tape, Var,
};
use crate::rng::stream;
use crate::{norm3, sub3, Error, Result, Vec3};

pub use assign::greedy_assign;
pub use loss::{injectivity_penalty, loss_match, loss_on_tape, MatchLoss, MatchLossVars};
pub use train::{evaluate_pairs, train_matcher, MatchEpochLog, MatchTrainConfig, TrainedMatcher};

pub const CHECKPOINT_KIND: &str = "matcher";
const PREFIX: &str = "matcher";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Largest plausible displacement of a fruit between sessions (meters).
    pub max_move: f64,
    pub token_dim: usize,
    pub ff_dim: usize,
    pub heads: usize,
    /// Sinusoid frequencies per coordinate in the positional encoding.
    pub n_freq: usize,
    pub leaky_slope: f64,
    pub rng_seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            max_move: 0.05,
            token_dim: 64,
            ff_dim: 128,
            heads: 4,
            n_freq: 6,
            leaky_slope: 0.01,
            rng_seed: 0,
        }
    }
}

impl MatchConfig {
    pub fn full_scale() -> Self {
        MatchConfig {
            token_dim: 512,
            ff_dim: 1024,
            heads: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_move > 0.0) {
            return Err(Error::Config(format!("max_move must be positive, got {}", self.max_move)));
        }
        if self.token_dim == 0 || self.ff_dim == 0 || self.n_freq == 0 {
            return Err(Error::Config("token_dim, ff_dim and n_freq must be positive".into()));
        }
        if self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Displacements from one query center to every candidate center.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelativePositions(pub Vec<Vec3>);

impl RelativePositions {
    pub fn between(query: Vec3, candidates: &[Vec3]) -> Self {
        RelativePositions(candidates.iter().map(|c| sub3(*c, query)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per coordinate and frequency `k`, `sin(2^k pi x / h)` then
/// `cos(2^k pi x / h)`; coordinates are laid out x, y, z and the result is
/// zero-padded to `out_dim` columns.
pub fn positional_encoding(t: &RelativePositions, out_dim: usize, n_freq: usize, max_move: f64) -> Result<Matrix> {
    if out_dim < 6 * n_freq {
        return Err(Error::Config(format!(
            "positional encoding needs {} columns, only {out_dim} available",
            6 * n_freq
        )));
    }
    let mut m = Matrix::zeros(t.len(), out_dim);
    for (r, d) in t.0.iter().enumerate() {
        let row = m.row_mut(r);
        for (axis, x) in d.iter().enumerate() {
            let u = PI * x / max_move;
            for k in 0..n_freq {
                let a = u * (1u64 << k) as f64;
                let base = axis * 2 * n_freq + 2 * k;
                row[base] = a.sin();
                row[base + 1] = a.cos();
            }
        }
    }
    Ok(m)
}

/// Candidate probabilities of one query; the last entry is no-match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRow {
    pub probs: Vec<f64>,
    /// Whether distance masking has been applied.
    pub masked: bool,
}

impl ProbRow {
    pub fn no_match(&self) -> f64 {
        *self.probs.last().expect("a row always has the no-match entry")
    }

    /// Zeroes every candidate farther than `max_move`; no renormalization.
    pub fn apply_mask(&mut self, t: &RelativePositions, max_move: f64) {
        for (p, d) in self.probs.iter_mut().zip(&t.0) {
            if norm3(*d) > max_move {
                *p = 0.0;
            }
        }
        self.masked = true;
    }

    /// Index of the largest entry, the earliest one on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (j, p) in self.probs.iter().enumerate() {
            if *p > self.probs[best] {
                best = j;
            }
        }
        best
    }
}

/// Rows for the queries at time t over `columns` = B candidates + no-match.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbMatrix {
    pub columns: usize,
    pub rows: Vec<ProbRow>,
}

impl ProbMatrix {
    pub fn from_rows(columns: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if columns == 0 || rows.iter().any(|r| r.len() != columns) {
            return Err(Error::Shape(format!("probability rows must all have {columns} > 0 entries")));
        }
        Ok(ProbMatrix {
            columns,
            rows: rows.into_iter().map(|probs| ProbRow { probs, masked: false }).collect(),
        })
    }

    pub fn num_candidates(&self) -> usize {
        self.columns - 1
    }

    pub fn no_match_column(&self) -> usize {
        self.columns - 1
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::metrics::write_json(self, path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherModel {
    pub config: MatchConfig,
    /// Length of the descriptors this model consumes.
    pub descriptor_len: usize,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: MatchConfig,
    descriptor_len: usize,
}

fn name(part: &str) -> String {
    format!("{PREFIX}.{part}")
}

impl MatcherModel {
    pub fn new(config: MatchConfig, descriptor_len: usize) -> Result<Self> {
        config.validate()?;
        if descriptor_len == 0 || 2 * descriptor_len < 6 * config.n_freq {
            return Err(Error::Config(format!(
                "descriptor length {descriptor_len} leaves no room for {} positional encoding values",
                6 * config.n_freq
            )));
        }
        let mut rng = stream(config.rng_seed, "matcher-init");
        let mut s = ParamStore::new();
        let l = config.token_dim;
        init_linear(&mut s, &mut rng, &name("in"), 2 * descriptor_len, l);
        init_batch_norm(&mut s, &name("in_bn"), l);
        init_encoder_layer(&mut s, &mut rng, &name("enc"), l, config.ff_dim, config.heads)?;
        init_batch_norm(&mut s, &name("enc_bn"), l);
        init_linear(&mut s, &mut rng, &name("out"), l, 1);
        Ok(MatcherModel {
            config,
            descriptor_len,
            params: s,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            descriptor_len: self.descriptor_len,
        };
        save_checkpoint(path, CHECKPOINT_KIND, &serde_json::to_value(&meta)?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Shape(format!("expected a matcher model, found {}", ck.kind)));
        }
        let meta: CheckpointMeta = serde_json::from_value(ck.config)?;
        let fresh = MatcherModel::new(meta.config, meta.descriptor_len)?;
        fresh.params.check_layout(&ck.params)?;
        Ok(MatcherModel {
            params: ck.params,
            ..fresh
        })
    }
}

/// Match logits `A x (B + 1)` for queries `d_t` (A x z) against candidates
/// `d_prev` (B x z) with centers in meters. Queries never interact in eval
/// mode; in train mode they share batch-norm statistics.
pub fn logits_on_tape(
    tape: &mut Tape,
    model: &MatcherModel,
    d_t: Var,
    d_prev: Var,
    centers_t: &[Vec3],
    centers_prev: &[Vec3],
    mode: Mode,
) -> Result<Var> {
    let z = model.descriptor_len;
    let (a, za) = tape.value(d_t).shape();
    let (b, zb) = tape.value(d_prev).shape();
    if (a > 0 && za != z) || (b > 0 && zb != z) {
        return Err(Error::Shape(format!(
            "matcher expects descriptors of length {z}, got {za} and {zb}"
        )));
    }
    if centers_t.len() != a || centers_prev.len() != b {
        return Err(Error::Shape("one center per descriptor required".into()));
    }
    if a == 0 {
        return Ok(tape.leaf(Matrix::zeros(0, b + 1)));
    }
    let cfg = &model.config;
    let store = &model.params;
    let tokens = if b == 0 {
        tape.leaf(Matrix::zeros(a, 2 * z))
    } else {
        let qi = Rc::new((0..a).flat_map(|i| std::iter::repeat(i).take(b)).collect::<Vec<_>>());
        let ci = Rc::new((0..a).flat_map(|_| 0..b).collect::<Vec<_>>());
        let q = tape.gather_rows(d_t, qi);
        let c = tape.gather_rows(d_prev, ci);
        let g = tape.concat_cols(&[q, c])?;
        let mut offsets = Vec::with_capacity(a * b);
        for qc in centers_t {
            offsets.extend(RelativePositions::between(*qc, centers_prev).0);
        }
        let pe = positional_encoding(&RelativePositions(offsets), 2 * z, cfg.n_freq, cfg.max_move)?;
        let pe = tape.leaf(pe);
        let g = tape.add(g, pe)?;
        let zero = tape.leaf(Matrix::zeros(1, 2 * z));
        let padded = tape.concat_rows(&[g, zero])?;
        let order = (0..a)
            .flat_map(|i| (i * b..(i + 1) * b).chain(std::iter::once(a * b)))
            .collect::<Vec<_>>();
        tape.gather_rows(padded, Rc::new(order))
    };
    let h = linear(tape, store, &name("in"), tokens)?;
    let h = batch_norm(tape, store, &name("in_bn"), h, mode)?;
    let h = tape.leaky_relu(h, cfg.leaky_slope);
    let width = b + 1;
    let mut attended = Vec::with_capacity(a);
    for i in 0..a {
        let block = tape.slice_rows(h, i * width, width);
        attended.push(encoder_layer(tape, store, &name("enc"), block, cfg.heads)?);
    }
    let h = if a == 1 { attended[0] } else { tape.concat_rows(&attended)? };
    let h = batch_norm(tape, store, &name("enc_bn"), h, mode)?;
    let h = tape.leaky_relu(h, cfg.leaky_slope);
    let scores = linear(tape, store, &name("out"), h)?;
    let mut rows = Vec::with_capacity(a);
    for i in 0..a {
        let col = tape.slice_rows(scores, i * width, width);
        rows.push(tape.transpose(col));
    }
    if a == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

fn descriptor_matrix(rows: &[Vec<f64>], z: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros(rows.len(), z);
    for (r, d) in rows.iter().enumerate() {
        if d.len() != z {
            return Err(Error::Shape(format!("descriptor of length {} where {z} expected", d.len())));
        }
        m.row_mut(r).copy_from_slice(d);
    }
    Ok(m)
}

/// Pre-mask probabilities for every query.
pub fn batch_probabilities(
    d_t: &[Vec<f64>],
    d_prev: &[Vec<f64>],
    centers_t: &[Vec3],
    centers_prev: &[Vec3],
    model: &MatcherModel,
) -> Result<ProbMatrix> {
    let z = model.descriptor_len;
    let mt = descriptor_matrix(d_t, z)?;
    let mp = descriptor_matrix(d_prev, z)?;
    let mut tape = Tape::new();
    let vt = tape.leaf(mt);
    let vp = tape.leaf(mp);
    let logits = logits_on_tape(&mut tape, model, vt, vp, centers_t, centers_prev, Mode::Eval)?;
    let lv = tape.value(logits);
    let rows = (0..lv.rows)
        .map(|r| {
            let mut p = lv.row(r).to_vec();
            softmax_in_place(&mut p);
            p
        })
        .collect();
    ProbMatrix::from_rows(d_prev.len() + 1, rows)
}

/// Masked distributions of all queries at time t over the previous fruits.
pub fn batch_match(
    d_t: &[Vec<f64>],
    d_prev: &[Vec<f64>],
    centers_t: &[Vec3],
    centers_prev: &[Vec3],
    model: &MatcherModel,
) -> Result<ProbMatrix> {
    let mut h = batch_probabilities(d_t, d_prev, centers_t, centers_prev, model)?;
    for (row, qc) in h.rows.iter_mut().zip(centers_t) {
        row.apply_mask(&RelativePositions::between(*qc, centers_prev), model.config.max_move);
    }
    Ok(h)
}

/// Masked distribution of one query.
pub fn match_query(
    d_q: &[f64],
    center_q: Vec3,
    d_prev: &[Vec<f64>],
    centers_prev: &[Vec3],
    model: &MatcherModel,
) -> Result<ProbRow> {
    let h = batch_match(&[d_q.to_vec()], d_prev, &[center_q], centers_prev, model)?;
    Ok(h.rows.into_iter().next().unwrap())
}

#[derive(Debug, Clone)]
pub struct SceneMatch {
    pub probabilities: ProbMatrix,
    pub association: TemporalAssociation,
}

/// Encodes the fruits of both sessions, predicts the probability matrix and
/// assigns greedily.
pub fn match_scenes(
    current: (&ColoredCloud, &[FruitInstance]),
    previous: (&ColoredCloud, &[FruitInstance]),
    encoder: &EncoderModel,
    matcher: &MatcherModel,
) -> Result<SceneMatch> {
    if encoder.config.descriptor_len() != matcher.descriptor_len {
        return Err(Error::Shape(format!(
            "encoder produces {} values, matcher expects {}",
            encoder.config.descriptor_len(),
            matcher.descriptor_len
        )));
    }
    let dt = encode_all(current.0, current.1, encoder, "t")?;
    let dp = encode_all(previous.0, previous.1, encoder, "t-1")?;
    let ct: Vec<Vec3> = current.1.iter().map(|f| f.center).collect();
    let cp: Vec<Vec3> = previous.1.iter().map(|f| f.center).collect();
    let rows = |s: crate::encoder::DescriptorSet| s.descriptors.into_iter().map(|d| d.0).collect::<Vec<_>>();
    let probabilities = batch_match(&rows(dt), &rows(dp), &ct, &cp, matcher)?;
    let association = greedy_assign(&probabilities);
    Ok(SceneMatch {
        probabilities,
        association,
    })
}
