//! Seeded synthetic strawberry rows: a leafy canopy slab with fruits hanging
//! below it, and temporal pairs where fruits grow, drift, ripen, vanish and
//! appear.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cloud::{
    load_association_csv, load_ply, save_association_csv, save_ply, ColoredCloud, SceneAnnotation,
    TemporalAssociation,
};
use crate::rng::{stream, substream, Rng};
use crate::{norm3, Error, Result, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchardConfig {
    /// Extent of the row along x (m).
    pub row_length: f64,
    /// Extent across the row along y (m).
    pub row_width: f64,
    pub fruit_count: [usize; 2],
    pub fruit_radius: [f64; 2],
    /// Vertical stretch of the fruit ellipsoid.
    pub elongation: [f64; 2],
    /// Point count for a fruit of the mean radius; scales with surface area.
    pub points_per_fruit: [usize; 2],
    /// Fruit centers sit this far below the canopy (m).
    pub fruit_depth: [f64; 2],
    /// Canopy points per square meter of row.
    pub canopy_density: f64,
    /// Vertical spread of the canopy slab (m).
    pub canopy_thickness: f64,
    pub canopy_color: [f64; 3],
    pub canopy_color_noise: f64,
    pub unripe_color: [f64; 3],
    pub ripe_color: [f64; 3],
    /// Std of the persistent per-fruit tint.
    pub fruit_tint: f64,
    pub fruit_color_noise: f64,
    /// Per-session radius factor.
    pub growth: [f64; 2],
    /// Per-axis std of the center drift (m).
    pub drift_sigma: f64,
    /// Upper bound on any drift (m).
    pub max_move: f64,
    pub maturation: f64,
    pub disappear_prob: f64,
    pub appear_prob: f64,
    /// Fraction of points removed uniformly to mimic occlusion.
    pub dropout: f64,
    pub rng_seed: u64,
}

impl Default for OrchardConfig {
    fn default() -> Self {
        OrchardConfig {
            row_length: 0.5,
            row_width: 0.15,
            fruit_count: [15, 15],
            fruit_radius: [0.0079, 0.0109],
            elongation: [1.0, 1.3],
            points_per_fruit: [450, 550],
            fruit_depth: [0.025, 0.07],
            canopy_density: 3.0e5,
            canopy_thickness: 0.004,
            canopy_color: [0.2, 0.5, 0.15],
            canopy_color_noise: 0.06,
            unripe_color: [0.85, 0.85, 0.6],
            ripe_color: [0.8, 0.08, 0.1],
            fruit_tint: 0.06,
            fruit_color_noise: 0.03,
            growth: [1.0, 1.1],
            drift_sigma: 0.01,
            max_move: 0.05,
            maturation: 0.15,
            disappear_prob: 0.1,
            appear_prob: 0.1,
            dropout: 0.0,
            rng_seed: 0,
        }
    }
}

impl OrchardConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1];
        if self.fruit_count[0] > self.fruit_count[1] || self.points_per_fruit[0] > self.points_per_fruit[1] {
            return Err(Error::Config("count ranges must be ordered".into()));
        }
        for (name, r) in [
            ("fruit_radius", self.fruit_radius),
            ("elongation", self.elongation),
            ("fruit_depth", self.fruit_depth),
            ("growth", self.growth),
        ] {
            if !ordered(r) || r[0] < 0.0 {
                return Err(Error::Config(format!("{name} must be a nonnegative ordered range")));
            }
        }
        if self.fruit_radius[0] <= 0.0 {
            return Err(Error::Config("fruit radius must be positive".into()));
        }
        for (name, p) in [
            ("disappear_prob", self.disappear_prob),
            ("appear_prob", self.appear_prob),
            ("dropout", self.dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.row_length <= 0.0 || self.row_width <= 0.0 || self.canopy_density < 0.0 {
            return Err(Error::Config("row extents and canopy density must be positive".into()));
        }
        if self.drift_sigma < 0.0 || self.max_move <= 0.0 || self.canopy_thickness < 0.0 {
            return Err(Error::Config("drift sigma and thickness must be nonnegative, max_move positive".into()));
        }
        Ok(())
    }

    fn mean_radius(&self) -> f64 {
        0.5 * (self.fruit_radius[0] + self.fruit_radius[1])
    }
}

#[derive(Debug, Clone)]
struct Fruit {
    center: Vec3,
    radius: f64,
    elongation: f64,
    maturity: f64,
    tint: [f64; 3],
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn fits(fruits: &[Fruit], center: Vec3, radius: f64) -> bool {
    fruits
        .iter()
        .all(|f| crate::dist3(f.center, center) >= f.radius * f.elongation.max(1.0) + radius)
}

const PLACEMENT_TRIES: usize = 5000;

fn place_fruit(cfg: &OrchardConfig, rng: &mut Rng, fruits: &[Fruit], radius: f64, elongation: f64) -> Option<Vec3> {
    let reach = radius * elongation;
    for _ in 0..PLACEMENT_TRIES {
        let c = [
            rng.gen_range(reach..(cfg.row_length - reach).max(reach + 1e-9)),
            rng.gen_range(reach..(cfg.row_width - reach).max(reach + 1e-9)),
            -uniform(rng, cfg.fruit_depth) - reach,
        ];
        if fits(fruits, c, reach) {
            return Some(c);
        }
    }
    None
}

fn new_fruit(cfg: &OrchardConfig, rng: &mut Rng, fruits: &[Fruit], young: bool) -> Option<Fruit> {
    let mut radius = uniform(rng, cfg.fruit_radius);
    if young {
        radius = cfg.fruit_radius[0] * rng.gen_range(0.7..1.0);
    }
    let elongation = uniform(rng, cfg.elongation);
    let maturity = if young { rng.gen_range(0.0..0.25) } else { rng.gen_range(0.0..1.0) };
    let tint = [0; 3].map(|_| cfg.fruit_tint * gauss(rng));
    let center = place_fruit(cfg, rng, fruits, radius, elongation)?;
    Some(Fruit {
        center,
        radius,
        elongation,
        maturity,
        tint,
    })
}

fn initial_fruits(cfg: &OrchardConfig, rng: &mut Rng) -> Result<Vec<Fruit>> {
    let n = rng.gen_range(cfg.fruit_count[0]..=cfg.fruit_count[1]);
    let mut fruits = Vec::with_capacity(n);
    for i in 0..n {
        let f = new_fruit(cfg, rng, &fruits, false).ok_or_else(|| {
            Error::Infeasible(format!(
                "could only place {i} of {n} fruits in a {} x {} m row",
                cfg.row_length, cfg.row_width
            ))
        })?;
        fruits.push(f);
    }
    Ok(fruits)
}

fn quantize_color(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn quantize_point(p: Vec3) -> Vec3 {
    p.map(|v| v as f32 as f64)
}

/// Renders fruits and canopy. Also returns, per fruit, its instance index
/// (none if dropout removed every point).
fn render(cfg: &OrchardConfig, fruits: &[Fruit], rng: &mut Rng) -> Result<(ColoredCloud, SceneAnnotation, Vec<Option<usize>>)> {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    let mut labels = Vec::new();
    let n_canopy = (cfg.canopy_density * cfg.row_length * cfg.row_width).round() as usize;
    for _ in 0..n_canopy {
        let p = [
            rng.gen_range(0.0..cfg.row_length),
            rng.gen_range(0.0..cfg.row_width),
            cfg.canopy_thickness * gauss(rng),
        ];
        let c = cfg.canopy_color.map(|v| v + cfg.canopy_color_noise * gauss(rng));
        points.push(p);
        colors.push(c);
        labels.push(None);
    }
    let mean_r = cfg.mean_radius();
    for (k, f) in fruits.iter().enumerate() {
        let base = rng.gen_range(cfg.points_per_fruit[0]..=cfg.points_per_fruit[1]) as f64;
        let n = ((base * (f.radius / mean_r).powi(2) * (1.0 + f.elongation) / 2.0).round() as usize).max(12);
        let m = f.maturity.clamp(0.0, 1.0);
        let body: [f64; 3] = std::array::from_fn(|i| cfg.unripe_color[i] + m * (cfg.ripe_color[i] - cfg.unripe_color[i]) + f.tint[i]);
        for _ in 0..n {
            let mut d = [gauss(rng), gauss(rng), gauss(rng)];
            let len = norm3(d).max(1e-12);
            d = d.map(|v| v / len);
            let p = [
                f.center[0] + f.radius * d[0],
                f.center[1] + f.radius * d[1],
                f.center[2] + f.radius * f.elongation * d[2],
            ];
            // Shoulders near the calyx stay paler.
            let shade = 0.15 * (d[2].max(0.0));
            let c: [f64; 3] = std::array::from_fn(|i| body[i] + shade * (cfg.unripe_color[i] - body[i]) + cfg.fruit_color_noise * gauss(rng));
            points.push(p);
            colors.push(c);
            labels.push(Some(k));
        }
    }
    let keep: Vec<bool> = (0..points.len())
        .map(|_| cfg.dropout == 0.0 || rng.gen::<f64>() >= cfg.dropout)
        .collect();
    let mut pts = Vec::new();
    let mut cols = Vec::new();
    let mut labs = Vec::new();
    for i in 0..points.len() {
        if keep[i] {
            pts.push(quantize_point(points[i]));
            cols.push(colors[i].map(quantize_color));
            labs.push(labels[i]);
        }
    }
    let mut present: Vec<usize> = labs.iter().flatten().copied().collect();
    present.sort_unstable();
    present.dedup();
    let remap: std::collections::BTreeMap<usize, usize> = present.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let labs: Vec<Option<usize>> = labs.iter().map(|l| l.map(|k| remap[&k])).collect();
    let cloud = ColoredCloud::new(pts, cols)?;
    let ann = SceneAnnotation::from_labels(&cloud, &labs)?;
    let ids = (0..fruits.len()).map(|k| remap.get(&k).copied()).collect();
    Ok((cloud, ann, ids))
}

/// One synthetic scene.
pub fn generate_scene(config: &OrchardConfig) -> Result<(ColoredCloud, SceneAnnotation)> {
    config.validate()?;
    let mut rng = stream(config.rng_seed, "scene");
    let fruits = initial_fruits(config, &mut rng)?;
    let (cloud, ann, _) = render(config, &fruits, &mut rng)?;
    Ok((cloud, ann))
}

/// Scenes at t-1 and t with the ground-truth association from t to t-1.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub prev: (ColoredCloud, SceneAnnotation),
    pub current: (ColoredCloud, SceneAnnotation),
    pub association: TemporalAssociation,
}

fn drift(cfg: &OrchardConfig, rng: &mut Rng) -> Vec3 {
    let d = [0; 3].map(|_| cfg.drift_sigma * gauss(rng));
    let n = norm3(d);
    if n > cfg.max_move {
        d.map(|v| v * cfg.max_move / n)
    } else {
        d
    }
}

pub fn generate_pair(config: &OrchardConfig) -> Result<ScenePair> {
    config.validate()?;
    let mut rng = stream(config.rng_seed, "pair");
    let before = initial_fruits(config, &mut rng)?;
    let (prev_cloud, prev_ann, prev_ids) = render(config, &before, &mut rng)?;

    let mut after: Vec<Fruit> = Vec::new();
    let mut origin: Vec<Option<usize>> = Vec::new();
    for (k, f) in before.iter().enumerate() {
        if rng.gen::<f64>() < config.disappear_prob {
            continue;
        }
        let mut g = f.clone();
        g.radius *= uniform(&mut rng, config.growth);
        g.maturity = (g.maturity + config.maturation).min(1.0);
        let reach = g.radius * g.elongation;
        for _ in 0..20 {
            let d = drift(config, &mut rng);
            let c = [f.center[0] + d[0], f.center[1] + d[1], f.center[2] + d[2]];
            if fits(&after, c, reach) {
                g.center = c;
                break;
            }
        }
        after.push(g);
        origin.push(Some(k));
    }
    for _ in 0..before.len() {
        if rng.gen::<f64>() < config.appear_prob {
            if let Some(f) = new_fruit(config, &mut rng, &after, true) {
                after.push(f);
                origin.push(None);
            }
        }
    }
    let mut order: Vec<usize> = (0..after.len()).collect();
    order.shuffle(&mut rng);
    let after: Vec<Fruit> = order.iter().map(|&i| after[i].clone()).collect();
    let origin: Vec<Option<usize>> = order.iter().map(|&i| origin[i]).collect();
    let (cur_cloud, cur_ann, cur_ids) = render(config, &after, &mut rng)?;
    let mut pairs = vec![None; cur_ann.instances.len()];
    for (k, slot) in cur_ids.iter().enumerate() {
        if let (Some(i), Some(src)) = (slot, origin[k]) {
            pairs[*i] = prev_ids[src];
        }
    }
    Ok(ScenePair {
        prev: (prev_cloud, prev_ann),
        current: (cur_cloud, cur_ann),
        association: TemporalAssociation::new(pairs)?,
    })
}

pub const PREV_SCENE: &str = "scene_t0.ply";
pub const CURRENT_SCENE: &str = "scene_t1.ply";
pub const ASSOCIATION: &str = "assoc_t1_t0.csv";

/// Imitates an imperfect segmenter: every fruit loses the `fraction` of its
/// points in a cap facing a random direction to background and absorbs as
/// many of the background points nearest to its center. Instance order, and
/// hence any association, is kept.
pub fn corrupt_boundaries(
    cloud: &ColoredCloud,
    annotation: &SceneAnnotation,
    fraction: f64,
    rng_seed: u64,
) -> Result<SceneAnnotation> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("corruption fraction must lie in [0, 1), got {fraction}")));
    }
    annotation.validate(cloud.len())?;
    let mut rng = stream(rng_seed, "corrupt-boundaries");
    let mut labels = annotation.point_labels();
    for (k, inst) in annotation.instances.iter().enumerate() {
        let moved = (fraction * inst.len() as f64).round() as usize;
        if moved == 0 || moved >= inst.len() {
            continue;
        }
        let dir = {
            let d = [0; 3].map(|_| gauss(&mut rng));
            let n = norm3(d).max(1e-12);
            d.map(|v| v / n)
        };
        let along = |i: usize| (0..3).map(|a| (cloud.points[i][a] - inst.center[a]) * dir[a]).sum::<f64>();
        let mut own = inst.point_indices.clone();
        own.sort_by(|&a, &b| along(b).total_cmp(&along(a)).then(a.cmp(&b)));
        let mut released = vec![false; cloud.len()];
        for &i in &own[..moved] {
            labels[i] = None;
            released[i] = true;
        }
        let mut free: Vec<(f64, usize)> = labels
            .iter()
            .enumerate()
            .filter(|(i, l)| l.is_none() && !released[*i])
            .map(|(i, _)| (crate::dist3(cloud.points[i], inst.center), i))
            .collect();
        free.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in free.iter().take(moved) {
            labels[i] = Some(k);
        }
    }
    SceneAnnotation::from_labels(cloud, &labels)
}

pub fn pair_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("pair_{index:03}"))
}

/// Writes `pairs` scene pairs under `root/pair_NNN/` plus `root/config.json`.
pub fn write_dataset(root: &Path, config: &OrchardConfig, pairs: usize) -> Result<Vec<PathBuf>> {
    config.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let cfg_path = root.join("config.json");
    let mut text = serde_json::to_string_pretty(&serde_json::json!({
        "schema_version": 1,
        "pairs": pairs,
        "orchard": config,
    }))?;
    text.push('\n');
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    let mut dirs = Vec::new();
    for k in 0..pairs {
        let cfg = OrchardConfig {
            rng_seed: substream(config.rng_seed, &format!("pair{k}")),
            ..config.clone()
        };
        let pair = generate_pair(&cfg)?;
        let dir = pair_dir(root, k);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_ply(&pair.prev.0, Some(&pair.prev.1), dir.join(PREV_SCENE))?;
        save_ply(&pair.current.0, Some(&pair.current.1), dir.join(CURRENT_SCENE))?;
        save_association_csv(&pair.association, dir.join(ASSOCIATION))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Reads one `pair_NNN` directory.
pub fn load_pair(dir: &Path) -> Result<ScenePair> {
    let read = |name: &str| -> Result<(ColoredCloud, SceneAnnotation)> {
        let path = dir.join(name);
        let (cloud, ann) = load_ply(&path)?;
        let ann = ann.ok_or_else(|| Error::Validation(format!("{} has no instance labels", path.display())))?;
        Ok((cloud, ann))
    };
    let prev = read(PREV_SCENE)?;
    let current = read(CURRENT_SCENE)?;
    let association = load_association_csv(dir.join(ASSOCIATION))?;
    if association.len() != current.1.instances.len() {
        return Err(Error::Validation(format!(
            "{}: association rows do not match instances",
            dir.display()
        )));
    }
    Ok(ScenePair {
        prev,
        current,
        association,
    })
}

/// Pair directories under `root`, sorted by name.
pub fn list_pairs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path();
        if p.is_dir() && p.join(ASSOCIATION).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}
