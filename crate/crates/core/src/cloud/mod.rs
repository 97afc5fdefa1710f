//! Point-cloud data model, annotations, cropping and augmentation.

mod assoc;
mod augment;
mod ply;

pub use assoc::{load_association_csv, save_association_csv, TemporalAssociation};
pub use augment::{augment, AugmentConfig};
pub use ply::{load_ply, save_ply, save_ply_ascii, PlyEncoding};

use crate::{dist3, Error, Result, Vec3};

/// Colored point cloud. Positions in meters, colors in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ColoredCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<[f64; 3]>,
}

impl ColoredCloud {
    pub fn new(points: Vec<Vec3>, colors: Vec<[f64; 3]>) -> Result<Self> {
        let c = ColoredCloud { points, colors };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.colors.len() {
            return Err(Error::Validation(format!(
                "{} points but {} colors",
                self.points.len(),
                self.colors.len()
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("non-finite coordinate at vertex {i}")));
            }
        }
        for (i, c) in self.colors.iter().enumerate() {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Validation(format!("color out of [0,1] at vertex {i}")));
            }
        }
        Ok(())
    }

    /// Sub-cloud made of the given point indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> ColoredCloud {
        ColoredCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
        }
    }
}

/// Per-point semantic class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Semantic {
    Background = 0,
    Fruit = 1,
}

/// A fruit: its member points plus the derived center and enclosing radius.
#[derive(Debug, Clone, PartialEq)]
pub struct FruitInstance {
    /// Sorted, unique indices into the owning cloud.
    pub point_indices: Vec<usize>,
    pub center: Vec3,
    pub radius: f64,
}

impl FruitInstance {
    /// Builds an instance and derives center (point mean) and radius
    /// (max distance to center). Returns `None` for an empty index set.
    pub fn from_points(cloud: &ColoredCloud, mut point_indices: Vec<usize>) -> Option<Self> {
        if point_indices.is_empty() {
            return None;
        }
        point_indices.sort_unstable();
        point_indices.dedup();
        let (center, radius) = center_and_radius(cloud, &point_indices);
        Some(FruitInstance {
            point_indices,
            center,
            radius,
        })
    }

    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }
}

/// Mean of the member points and the radius of the smallest sphere centered
/// there that contains them all.
pub fn center_and_radius(cloud: &ColoredCloud, indices: &[usize]) -> (Vec3, f64) {
    let mut c = [0.0; 3];
    for &i in indices {
        let p = cloud.points[i];
        c[0] += p[0];
        c[1] += p[1];
        c[2] += p[2];
    }
    let n = indices.len() as f64;
    let c = [c[0] / n, c[1] / n, c[2] / n];
    let r = indices
        .iter()
        .map(|&i| dist3(cloud.points[i], c))
        .fold(0.0, f64::max);
    (c, r)
}

/// Ground-truth or predicted partition of a cloud into fruits and background.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneAnnotation {
    pub instances: Vec<FruitInstance>,
    pub background_indices: Vec<usize>,
    pub per_point_semantic: Vec<Semantic>,
}

impl SceneAnnotation {
    /// Builds an annotation from a per-point label (`None` = background).
    /// Instances are ordered by ascending label; labels need not be dense.
    pub fn from_labels(cloud: &ColoredCloud, labels: &[Option<usize>]) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(Error::Validation(format!(
                "{} labels for {} points",
                labels.len(),
                cloud.len()
            )));
        }
        let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        let mut background = Vec::new();
        let mut sem = vec![Semantic::Background; labels.len()];
        for (i, l) in labels.iter().enumerate() {
            match l {
                Some(l) => {
                    by_label.entry(*l).or_default().push(i);
                    sem[i] = Semantic::Fruit;
                }
                None => background.push(i),
            }
        }
        let instances = by_label
            .into_values()
            .filter_map(|idx| FruitInstance::from_points(cloud, idx))
            .collect();
        Ok(SceneAnnotation {
            instances,
            background_indices: background,
            per_point_semantic: sem,
        })
    }

    /// Annotation with every point in background.
    pub fn all_background(n: usize) -> Self {
        SceneAnnotation {
            instances: Vec::new(),
            background_indices: (0..n).collect(),
            per_point_semantic: vec![Semantic::Background; n],
        }
    }

    pub fn num_points(&self) -> usize {
        self.per_point_semantic.len()
    }

    /// Instance index per point, `None` for background.
    pub fn point_labels(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.num_points()];
        for (k, inst) in self.instances.iter().enumerate() {
            for &i in &inst.point_indices {
                labels[i] = Some(k);
            }
        }
        labels
    }

    pub fn centers(&self) -> Vec<Vec3> {
        self.instances.iter().map(|i| i.center).collect()
    }

    /// Recomputes centers and radii from the member points.
    pub fn refresh_geometry(&mut self, cloud: &ColoredCloud) {
        for inst in &mut self.instances {
            let (c, r) = center_and_radius(cloud, &inst.point_indices);
            inst.center = c;
            inst.radius = r;
        }
    }

    /// Checks the partition invariants against a cloud of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.per_point_semantic.len() != n {
            return Err(Error::Validation(format!(
                "annotation covers {} points, cloud has {n}",
                self.per_point_semantic.len()
            )));
        }
        let mut seen = vec![false; n];
        let mut mark = |i: usize| -> Result<()> {
            if i >= n {
                return Err(Error::Validation(format!("point index {i} out of range")));
            }
            if seen[i] {
                return Err(Error::Validation(format!("point {i} assigned twice")));
            }
            seen[i] = true;
            Ok(())
        };
        for inst in &self.instances {
            if inst.point_indices.is_empty() {
                return Err(Error::Validation("empty instance".into()));
            }
            for &i in &inst.point_indices {
                mark(i)?;
                if self.per_point_semantic[i] != Semantic::Fruit {
                    return Err(Error::Validation(format!("instance point {i} not labeled fruit")));
                }
            }
        }
        for &i in &self.background_indices {
            mark(i)?;
            if self.per_point_semantic[i] != Semantic::Background {
                return Err(Error::Validation(format!("background point {i} labeled fruit")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Validation(format!("point {i} not covered")));
        }
        Ok(())
    }
}

/// Axis-aligned slab crop along the x (row) axis.
pub fn crop_box(
    cloud: &ColoredCloud,
    annotation: &SceneAnnotation,
    center: Vec3,
    width: f64,
) -> (ColoredCloud, SceneAnnotation) {
    crop_box_along(cloud, annotation, center, width, 0)
}

/// Keeps points with `|p[axis] - center[axis]| <= width / 2`; other axes are
/// unbounded. Instances losing all points are dropped and the survivors get
/// their geometry recomputed.
pub fn crop_box_along(
    cloud: &ColoredCloud,
    annotation: &SceneAnnotation,
    center: Vec3,
    width: f64,
    axis: usize,
) -> (ColoredCloud, SceneAnnotation) {
    let half = width / 2.0;
    let keep: Vec<usize> = (0..cloud.len())
        .filter(|&i| (cloud.points[i][axis] - center[axis]).abs() <= half)
        .collect();
    let out = cloud.select(&keep);
    let labels = annotation.point_labels();
    let new_labels: Vec<Option<usize>> = keep.iter().map(|&i| labels[i]).collect();
    let ann = SceneAnnotation::from_labels(&out, &new_labels)
        .expect("label count matches by construction");
    (out, ann)
}
