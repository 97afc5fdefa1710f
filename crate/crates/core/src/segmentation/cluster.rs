use std::collections::{BTreeMap, HashMap};

use super::SegPrediction;
use crate::cloud::{ColoredCloud, SceneAnnotation};
use crate::{dist3, Error, Result, Vec3};

pub const FRUIT_THRESHOLD: f64 = 0.5;
pub const MAX_ITERATIONS: usize = 300;

/// Fruit points moved by their predicted offsets, with back-pointers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShiftedPoints {
    pub positions: Vec<Vec3>,
    pub source: Vec<usize>,
}

/// Keeps points whose fruit probability exceeds 0.5 and adds their offsets.
pub fn shift_points(cloud: &ColoredCloud, pred: &SegPrediction) -> Result<ShiftedPoints> {
    if pred.len() != cloud.len() {
        return Err(Error::Validation(format!(
            "prediction has {} rows for {} points",
            pred.len(),
            cloud.len()
        )));
    }
    let mut out = ShiftedPoints::default();
    for i in 0..cloud.len() {
        if pred.fruit_probability(i) > FRUIT_THRESHOLD {
            let p = cloud.points[i];
            let o = pred.offsets[i];
            out.positions.push([p[0] + o[0], p[1] + o[1], p[2] + o[2]]);
            out.source.push(i);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterResult {
    /// Cluster of each input point.
    pub cluster_id: Vec<usize>,
    pub modes: Vec<Vec3>,
}

type Cell = (i64, i64, i64);

fn cell_of(p: Vec3, size: f64) -> Cell {
    (
        (p[0] / size).floor() as i64,
        (p[1] / size).floor() as i64,
        (p[2] / size).floor() as i64,
    )
}

/// Uniform hash grid for fixed-radius neighbor queries.
struct Grid<'a> {
    points: &'a [Vec3],
    size: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vec3], size: f64) -> Self {
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(*p, size)).or_default().push(i);
        }
        Grid { points, size, cells }
    }

    /// Mean and count of points within `radius` (<= cell size) of `x`,
    /// accumulated in index order.
    fn ball_mean(&self, x: Vec3, radius: f64) -> (Vec3, usize) {
        let c = cell_of(x, self.size);
        let mut members = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                        members.extend(v.iter().copied().filter(|&i| dist3(self.points[i], x) <= radius));
                    }
                }
            }
        }
        members.sort_unstable();
        let mut s = [0.0; 3];
        for &i in &members {
            for k in 0..3 {
                s[k] += self.points[i][k];
            }
        }
        let n = members.len();
        if n == 0 {
            return (x, 0);
        }
        (s.map(|v| v / n as f64), n)
    }

    fn nearest(&self, x: Vec3, candidates: &[Vec3]) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, m) in candidates.iter().enumerate() {
            let d = dist3(*m, x);
            if d < bd {
                bd = d;
                best = i;
            }
        }
        best
    }
}

/// Flat-kernel mean shift. Seeds are the centers of occupied cells of a
/// `bandwidth / 2` grid; converged modes closer than `bandwidth / 2` are
/// merged, weighted by basin size; every point joins its nearest mode.
pub fn mean_shift(points: &[Vec3], bandwidth: f64) -> Result<ClusterResult> {
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {bandwidth}")));
    }
    if points.is_empty() {
        return Ok(ClusterResult::default());
    }
    // Canonical order makes the result independent of input order.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (points[a], points[b]);
        p[0].total_cmp(&q[0])
            .then(p[1].total_cmp(&q[1]))
            .then(p[2].total_cmp(&q[2]))
    });
    let sorted: Vec<Vec3> = order.iter().map(|&i| points[i]).collect();
    let grid = Grid::new(&sorted, bandwidth);

    let half = bandwidth / 2.0;
    let mut seed_cells: Vec<Cell> = sorted.iter().map(|p| cell_of(*p, half)).collect();
    seed_cells.sort_unstable();
    seed_cells.dedup();

    let tol = 1e-5 * bandwidth;
    let mut modes: Vec<(Vec3, usize)> = Vec::with_capacity(seed_cells.len());
    for c in seed_cells {
        let mut x = [
            (c.0 as f64 + 0.5) * half,
            (c.1 as f64 + 0.5) * half,
            (c.2 as f64 + 0.5) * half,
        ];
        let mut count = 0;
        for _ in 0..MAX_ITERATIONS {
            let (m, n) = grid.ball_mean(x, bandwidth);
            count = n;
            if n == 0 {
                break;
            }
            let shift = dist3(m, x);
            x = m;
            if shift < tol {
                break;
            }
        }
        if count > 0 {
            modes.push((x, count));
        }
    }

    // Merge close modes, strongest basins first, until none are within bw/2.
    loop {
        modes.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(a.0[0].total_cmp(&b.0[0]))
                .then(a.0[1].total_cmp(&b.0[1]))
                .then(a.0[2].total_cmp(&b.0[2]))
        });
        let mut kept: Vec<(Vec3, usize)> = Vec::new();
        let mut merged_any = false;
        for (x, n) in modes {
            if let Some(k) = kept.iter_mut().find(|(y, _)| dist3(*y, x) < half) {
                let total = (k.1 + n) as f64;
                for d in 0..3 {
                    k.0[d] = (k.0[d] * k.1 as f64 + x[d] * n as f64) / total;
                }
                k.1 += n;
                merged_any = true;
            } else {
                kept.push((x, n));
            }
        }
        modes = kept;
        if !merged_any {
            break;
        }
    }
    modes.sort_by(|a, b| {
        a.0[0].total_cmp(&b.0[0])
            .then(a.0[1].total_cmp(&b.0[1]))
            .then(a.0[2].total_cmp(&b.0[2]))
    });
    let mode_pos: Vec<Vec3> = modes.iter().map(|m| m.0).collect();
    let mut cluster_id = vec![0; points.len()];
    for (rank, &orig) in order.iter().enumerate() {
        cluster_id[orig] = grid.nearest(sorted[rank], &mode_pos);
    }
    Ok(ClusterResult {
        cluster_id,
        modes: mode_pos,
    })
}

pub const DEFAULT_MIN_POINTS: usize = 10;

/// Groups the original points of each cluster into instances; clusters with
/// fewer than `min_points` points fall back to background.
pub fn assemble_instances(
    cloud: &ColoredCloud,
    shifted: &ShiftedPoints,
    clusters: &ClusterResult,
    min_points: usize,
) -> Result<SceneAnnotation> {
    if clusters.cluster_id.len() != shifted.source.len() {
        return Err(Error::Validation("cluster ids do not match shifted points".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&c, &src) in clusters.cluster_id.iter().zip(&shifted.source) {
        groups.entry(c).or_default().push(src);
    }
    let mut labels = vec![None; cloud.len()];
    let mut next = 0;
    for members in groups.values() {
        if members.len() >= min_points {
            for &i in members {
                labels[i] = Some(next);
            }
            next += 1;
        }
    }
    SceneAnnotation::from_labels(cloud, &labels)
}
