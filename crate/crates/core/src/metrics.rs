//! Instance matching by IoU, panoptic quality, the ID-transfer protocol for
//! evaluating matching on predicted instances, and matching F1 scores.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cloud::{SceneAnnotation, Semantic, TemporalAssociation};
use crate::{Error, Result};

/// A true-positive pairing of a predicted and a ground-truth instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InstancePair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct InstanceMatching {
    pub pairs: Vec<InstancePair>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// IoU of two sorted, duplicate-free index sets.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Every `(pred, gt, IoU)` with a nonempty intersection, sorted by pred then gt.
fn overlapping_pairs(pred: &SceneAnnotation, gt: &SceneAnnotation) -> Vec<InstancePair> {
    let gt_label = gt.point_labels();
    let mut out = Vec::new();
    for (p, inst) in pred.instances.iter().enumerate() {
        let mut inter: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &inst.point_indices {
            if let Some(g) = gt_label[i] {
                *inter.entry(g).or_default() += 1;
            }
        }
        for (g, n) in inter {
            let union = inst.len() + gt.instances[g].len() - n;
            out.push(InstancePair {
                pred: p,
                gt: g,
                iou: n as f64 / union as f64,
            });
        }
    }
    out
}

fn check_aligned(pred: &SceneAnnotation, gt: &SceneAnnotation) -> Result<()> {
    if pred.num_points() != gt.num_points() {
        return Err(Error::Validation(format!(
            "prediction covers {} points, ground truth {}",
            pred.num_points(),
            gt.num_points()
        )));
    }
    Ok(())
}

/// One-to-one pairing of instances with IoU at or above `iou_threshold`,
/// highest IoU first (ties: lower pred index, then lower gt index).
pub fn match_instances(pred: &SceneAnnotation, gt: &SceneAnnotation, iou_threshold: f64) -> Result<InstanceMatching> {
    check_aligned(pred, gt)?;
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Config(format!("IoU threshold {iou_threshold} outside (0, 1]")));
    }
    let mut cands: Vec<InstancePair> = overlapping_pairs(pred, gt)
        .into_iter()
        .filter(|c| c.iou >= iou_threshold)
        .collect();
    cands.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.pred.cmp(&b.pred)).then(a.gt.cmp(&b.gt)));
    let mut pred_used = vec![false; pred.instances.len()];
    let mut gt_used = vec![false; gt.instances.len()];
    let mut pairs = Vec::new();
    for c in cands {
        if !pred_used[c.pred] && !gt_used[c.gt] {
            pred_used[c.pred] = true;
            gt_used[c.gt] = true;
            pairs.push(c);
        }
    }
    pairs.sort_by_key(|c| (c.pred, c.gt));
    Ok(InstanceMatching {
        pairs,
        false_positives: (0..pred_used.len()).filter(|&i| !pred_used[i]).collect(),
        false_negatives: (0..gt_used.len()).filter(|&i| !gt_used[i]).collect(),
    })
}

/// Quality figures for one class.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassQuality {
    /// Mean IoU over true positives (equal to `sq`).
    #[serde(rename = "IoU")]
    pub iou: f64,
    /// Point-wise semantic IoU of the class.
    pub semantic_iou: f64,
    #[serde(rename = "RQ")]
    pub rq: f64,
    #[serde(rename = "SQ")]
    pub sq: f64,
    #[serde(rename = "PQ")]
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Set when the class had no TP, FP or FN segment at all.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PanopticReport {
    pub background: ClassQuality,
    pub fruit: ClassQuality,
    pub average: ClassQuality,
}

#[derive(Debug, Clone, Copy, Default)]
struct ClassCounts {
    tp: usize,
    fp: usize,
    fn_: usize,
    iou_sum: f64,
    sem_inter: usize,
    sem_union: usize,
}

impl ClassCounts {
    fn quality(&self) -> ClassQuality {
        let degenerate = self.tp + self.fp + self.fn_ == 0;
        let sq = if self.tp > 0 { self.iou_sum / self.tp as f64 } else { 0.0 };
        let denom = self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64;
        let rq = if denom > 0.0 { self.tp as f64 / denom } else { 0.0 };
        ClassQuality {
            iou: sq,
            semantic_iou: if self.sem_union > 0 {
                self.sem_inter as f64 / self.sem_union as f64
            } else {
                0.0
            },
            rq,
            sq,
            pq: sq * rq,
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            degenerate,
        }
    }
}

/// Accumulates panoptic counts over several scenes.
#[derive(Debug, Clone, Default)]
pub struct PanopticAccumulator {
    background: ClassCounts,
    fruit: ClassCounts,
}

impl PanopticAccumulator {
    pub fn new() -> Self {
        PanopticAccumulator::default()
    }

    pub fn add(&mut self, pred: &SceneAnnotation, gt: &SceneAnnotation, iou_threshold: f64) -> Result<()> {
        let m = match_instances(pred, gt, iou_threshold)?;
        let f = &mut self.fruit;
        f.tp += m.pairs.len();
        f.fp += m.false_positives.len();
        f.fn_ += m.false_negatives.len();
        f.iou_sum += m.pairs.iter().map(|p| p.iou).sum::<f64>();

        let bg_iou = iou(&pred.background_indices, &gt.background_indices);
        let b = &mut self.background;
        if !pred.background_indices.is_empty() || !gt.background_indices.is_empty() {
            if bg_iou >= iou_threshold {
                b.tp += 1;
                b.iou_sum += bg_iou;
            } else {
                b.fp += usize::from(!pred.background_indices.is_empty());
                b.fn_ += usize::from(!gt.background_indices.is_empty());
            }
        }
        for (counts, class) in [(&mut self.background, Semantic::Background), (&mut self.fruit, Semantic::Fruit)] {
            for (p, g) in pred.per_point_semantic.iter().zip(&gt.per_point_semantic) {
                let (a, b) = (*p == class, *g == class);
                counts.sem_inter += usize::from(a && b);
                counts.sem_union += usize::from(a || b);
            }
        }
        Ok(())
    }

    pub fn report(&self) -> PanopticReport {
        let b = self.background.quality();
        let f = self.fruit.quality();
        let avg = |x: f64, y: f64| 0.5 * (x + y);
        PanopticReport {
            background: b,
            fruit: f,
            average: ClassQuality {
                iou: avg(b.iou, f.iou),
                semantic_iou: avg(b.semantic_iou, f.semantic_iou),
                rq: avg(b.rq, f.rq),
                sq: avg(b.sq, f.sq),
                pq: avg(b.pq, f.pq),
                tp: b.tp + f.tp,
                fp: b.fp + f.fp,
                fn_: b.fn_ + f.fn_,
                degenerate: b.degenerate && f.degenerate,
            },
        }
    }
}

/// Panoptic quality of one scene with background as a single segment.
pub fn panoptic_quality(pred: &SceneAnnotation, gt: &SceneAnnotation, iou_threshold: f64) -> Result<PanopticReport> {
    let mut acc = PanopticAccumulator::new();
    acc.add(pred, gt, iou_threshold)?;
    Ok(acc.report())
}

impl PanopticReport {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        w.write_record(["class", "IoU", "semantic_IoU", "RQ", "SQ", "PQ", "TP", "FP", "FN"])?;
        for (name, q) in [("background", &self.background), ("fruit", &self.fruit), ("average", &self.average)] {
            w.write_record([
                name.to_string(),
                format!("{:.4}", q.iou),
                format!("{:.4}", q.semantic_iou),
                format!("{:.4}", q.rq),
                format!("{:.4}", q.sq),
                format!("{:.4}", q.pq),
                q.tp.to_string(),
                q.fp.to_string(),
                q.fn_.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))
    }
}

/// For each ground-truth instance, the predicted instance whose identity it
/// adopts: the highest-IoU prediction when that IoU exceeds the threshold.
/// A prediction claimed by several ground-truth instances goes to the one
/// with the higher IoU; the others adopt nothing.
pub fn adopt_ids(pred: &SceneAnnotation, gt: &SceneAnnotation, iou_threshold: f64) -> Result<Vec<Option<usize>>> {
    check_aligned(pred, gt)?;
    let mut best: Vec<Option<(usize, f64)>> = vec![None; gt.instances.len()];
    for c in overlapping_pairs(pred, gt) {
        let slot = &mut best[c.gt];
        if slot.map_or(true, |(_, v)| c.iou > v) {
            *slot = Some((c.pred, c.iou));
        }
    }
    let mut owner: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (g, b) in best.iter().enumerate() {
        if let Some((p, v)) = *b {
            if v > iou_threshold && owner.get(&p).map_or(true, |&(_, ov)| v > ov) {
                owner.insert(p, (g, v));
            }
        }
    }
    let mut adopted = vec![None; gt.instances.len()];
    for (p, (g, _)) in owner {
        adopted[g] = Some(p);
    }
    Ok(adopted)
}

/// Ground-truth matching over predicted instances of one session pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferredTruth {
    /// For every predicted instance at time t, the predicted instance at
    /// t-1 it should match, or none.
    pub association: TemporalAssociation,
    pub adopted_t: Vec<Option<usize>>,
    pub adopted_prev: Vec<Option<usize>>,
}

/// Transfers a ground-truth association onto predicted instances. Predicted
/// instances not adopted by any ground-truth instance become negatives.
pub fn transfer_ids(
    pred_t: &SceneAnnotation,
    gt_t: &SceneAnnotation,
    pred_prev: &SceneAnnotation,
    gt_prev: &SceneAnnotation,
    gt_association: &TemporalAssociation,
    iou_threshold: f64,
) -> Result<TransferredTruth> {
    if gt_association.len() != gt_t.instances.len() {
        return Err(Error::Validation(format!(
            "association has {} rows for {} instances",
            gt_association.len(),
            gt_t.instances.len()
        )));
    }
    let adopted_t = adopt_ids(pred_t, gt_t, iou_threshold)?;
    let adopted_prev = adopt_ids(pred_prev, gt_prev, iou_threshold)?;
    let mut pairs = vec![None; pred_t.instances.len()];
    for (g, p) in adopted_t.iter().enumerate() {
        if let (Some(p), Some(gp)) = (p, gt_association.get(g)) {
            pairs[*p] = adopted_prev.get(gp).copied().flatten();
        }
    }
    Ok(TransferredTruth {
        association: TemporalAssociation::new(pairs)?,
        adopted_t,
        adopted_prev,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchConfusion {
    pub cm: usize,
    pub mm: usize,
    pub fm: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchConfusion {
    pub fn total(&self) -> usize {
        self.cm + self.mm + self.fm + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &MatchConfusion) {
        self.cm += other.cm;
        self.mm += other.mm;
        self.fm += other.fm;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

pub fn matching_confusion(pred: &TemporalAssociation, gt: &TemporalAssociation) -> Result<MatchConfusion> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!(
            "predicted association has {} rows, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = MatchConfusion::default();
    for (p, g) in pred.pairs().iter().zip(gt.pairs()) {
        match (g, p) {
            (Some(a), Some(b)) if a == b => c.cm += 1,
            (Some(_), Some(_)) => c.mm += 1,
            (None, Some(_)) => c.fm += 1,
            (None, None) => c.tn += 1,
            (Some(_), None) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct F1Report {
    pub f1p: f64,
    pub f1n: f64,
    pub mf1: f64,
    /// Set when the positive F1 was 0/0.
    pub f1p_undefined: bool,
    pub f1n_undefined: bool,
}

pub fn f1_scores(c: &MatchConfusion) -> F1Report {
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    let (f1p, f1p_undefined) = ratio(2 * c.cm, 2 * c.cm + c.mm + c.fm + c.fn_);
    let (f1n, f1n_undefined) = ratio(2 * c.tn, 2 * c.tn + c.fm + c.fn_);
    F1Report {
        f1p,
        f1n,
        mf1: 0.5 * (f1p + f1n),
        f1p_undefined,
        f1n_undefined,
    }
}

/// One row of the ID-transfer evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    #[serde(rename = "F1p")]
    pub f1p: f64,
    #[serde(rename = "F1n")]
    pub f1n: f64,
    #[serde(rename = "mF1")]
    pub mf1: f64,
    pub confusion: MatchConfusion,
}

impl ThresholdRow {
    pub fn new(threshold: f64, confusion: MatchConfusion) -> Self {
        let f = f1_scores(&confusion);
        ThresholdRow {
            threshold,
            f1p: f.f1p,
            f1n: f.f1n,
            mf1: f.mf1,
            confusion,
        }
    }
}

/// Parses `start:stop:step` into an inclusive grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("grid '{spec}' is not start:stop:step")))?;
    match nums.as_slice() {
        [v] => Ok(vec![*v]),
        [start, stop, step] if *step > 0.0 && stop >= start => {
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12).collect())
        }
        _ => Err(Error::Config(format!("grid '{spec}' is not start:stop:step"))),
    }
}

pub fn write_threshold_csv(rows: &[ThresholdRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["threshold", "F1p", "F1n", "mF1", "CM", "MM", "FM", "TN", "FN"])?;
    for r in rows {
        let c = &r.confusion;
        w.write_record([
            format!("{:.2}", r.threshold),
            format!("{:.4}", r.f1p),
            format!("{:.4}", r.f1n),
            format!("{:.4}", r.mf1),
            c.cm.to_string(),
            c.mm.to_string(),
            c.fm.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Writes pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f).map_err(|e| Error::io(path, e))
}
