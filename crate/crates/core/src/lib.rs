//! Fruit monitoring on colored point clouds.
//!
//! The crate covers the full pipeline: instance segmentation of fruits
//! (semantic + offset prediction followed by mean-shift clustering), a sparse
//! 3D convolutional descriptor per fruit, an attention-based matcher that
//! associates fruits across sessions with an explicit no-match outcome, the
//! evaluation protocol (PQ/SQ/RQ, matching confusion, F1 scores), a
//! nearest-neighbour baseline and a seeded synthetic orchard generator.

pub mod baseline;
pub mod cloud;
pub mod encoder;
pub mod error;
pub mod matcher;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod segmentation;
pub mod sparsegrid;
pub mod synth;

pub use error::{Error, Result};

/// Three-component vector in meters.
pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn norm3(a: Vec3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub(crate) fn dist3(a: Vec3, b: Vec3) -> f64 {
    norm3(sub3(a, b))
}
