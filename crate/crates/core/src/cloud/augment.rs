use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ColoredCloud, SceneAnnotation};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// Training-time augmentation. Applied in a fixed order with one seeded
/// stream: rotate, flip, scale, point jitter, color jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Extra rotation about z, uniform in `[-yaw, yaw]` degrees.
    pub yaw_range_deg: f64,
    /// Rotation about each of x, y, z, uniform in `[-r, r]` degrees.
    pub per_axis_rotation_range_deg: f64,
    /// Axes (0, 1, 2) each mirrored with probability 1/2.
    pub flip_axes: Vec<usize>,
    /// Isotropic scale factor range `[lo, hi]`.
    pub scale_range: [f64; 2],
    /// Per-coordinate Gaussian std in meters.
    pub point_jitter_sigma: f64,
    /// Per-channel Gaussian std; results clamped to `[0, 1]`.
    pub color_jitter_sigma: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            yaw_range_deg: 0.0,
            per_axis_rotation_range_deg: 0.0,
            flip_axes: Vec::new(),
            scale_range: [1.0, 1.0],
            point_jitter_sigma: 0.0,
            color_jitter_sigma: 0.0,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Settings used when training the descriptor and matcher: ±30° about
    /// every axis, 7e-4 m point jitter and 0.05 color jitter.
    pub fn matcher_training(rng_seed: u64) -> Self {
        AugmentConfig {
            per_axis_rotation_range_deg: 30.0,
            point_jitter_sigma: 7e-4,
            color_jitter_sigma: 0.05,
            rng_seed,
            ..Default::default()
        }
    }

    /// Settings used when training segmentation on strawberry crops.
    pub fn segmentation_training(rng_seed: u64) -> Self {
        AugmentConfig {
            yaw_range_deg: 180.0,
            flip_axes: vec![0, 1],
            scale_range: [0.97, 1.03],
            point_jitter_sigma: 3e-4,
            rng_seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.yaw_range_deg < 0.0 || self.per_axis_rotation_range_deg < 0.0 {
            return Err(Error::Config("rotation ranges must be nonnegative".into()));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(Error::Config("scale range must satisfy 0 < lo <= hi".into()));
        }
        if self.point_jitter_sigma < 0.0 || self.color_jitter_sigma < 0.0 {
            return Err(Error::Config("jitter sigmas must be nonnegative".into()));
        }
        if self.flip_axes.iter().any(|&a| a > 2) {
            return Err(Error::Config("flip axes must be 0, 1 or 2".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl rand::Rng, half: f64) -> f64 {
    if half == 0.0 {
        0.0
    } else {
        rng.gen_range(-half..=half)
    }
}

/// Rotation matrix `Rz * Ry * Rx`.
fn rotation(ax: f64, ay: f64, az: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Augments a cloud about the coordinate origin; instance geometry is
/// recomputed from the transformed points.
pub fn augment(
    cloud: &ColoredCloud,
    annotation: &SceneAnnotation,
    config: &AugmentConfig,
) -> Result<(ColoredCloud, SceneAnnotation)> {
    config.validate()?;
    let mut rng = rng_from_seed(config.rng_seed);
    let deg = std::f64::consts::PI / 180.0;
    let r = config.per_axis_rotation_range_deg * deg;
    let ax = uniform(&mut rng, r);
    let ay = uniform(&mut rng, r);
    let az = uniform(&mut rng, r) + uniform(&mut rng, config.yaw_range_deg * deg);
    let rot = rotation(ax, ay, az);
    let mut flip = [1.0f64; 3];
    for &a in &config.flip_axes {
        if rng.gen_bool(0.5) {
            flip[a] = -1.0;
        }
    }
    let [lo, hi] = config.scale_range;
    let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };

    let mut out = cloud.clone();
    let identity_rot = ax == 0.0 && ay == 0.0 && az == 0.0;
    for p in &mut out.points {
        if !identity_rot {
            let q = *p;
            for (k, row) in rot.iter().enumerate() {
                p[k] = row[0] * q[0] + row[1] * q[1] + row[2] * q[2];
            }
        }
        for k in 0..3 {
            p[k] *= flip[k] * scale;
        }
    }
    if config.point_jitter_sigma > 0.0 {
        for p in &mut out.points {
            for v in p.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += config.point_jitter_sigma * n;
            }
        }
    }
    if config.color_jitter_sigma > 0.0 {
        for c in &mut out.colors {
            for v in c.iter_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v = (*v + config.color_jitter_sigma * n).clamp(0.0, 1.0);
            }
        }
    }
    let mut ann = annotation.clone();
    ann.refresh_geometry(&out);
    Ok((out, ann))
}
