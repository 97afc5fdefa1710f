//! Voxelization, sparse coordinate lookup and convolution rulebooks.
//!
//! Coordinates are stored in base-voxel units. A tensor at stride `s` only
//! holds coordinates that are multiples of `s`. Several clouds can share one
//! tensor; the `batch` field keeps them apart.

use std::collections::HashMap;

use crate::cloud::ColoredCloud;
use crate::nn::Matrix;
use crate::{dist3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub batch: u32,
    pub i: i32,
    pub j: i32,
    pub k: i32,
}

impl VoxelCoord {
    pub fn new(i: i32, j: i32, k: i32) -> Self {
        VoxelCoord { batch: 0, i, j, k }
    }

    fn offset(self, d: [i32; 3], scale: i32) -> Self {
        VoxelCoord {
            batch: self.batch,
            i: self.i + d[0] * scale,
            j: self.j + d[1] * scale,
            k: self.k + d[2] * scale,
        }
    }

    /// Parent coordinate one stride level up (`stride` is the child level).
    pub fn downsampled(self, stride: i32) -> Self {
        let s2 = 2 * stride;
        VoxelCoord {
            batch: self.batch,
            i: self.i.div_euclid(s2) * s2,
            j: self.j.div_euclid(s2) * s2,
            k: self.k.div_euclid(s2) * s2,
        }
    }
}

/// Features attached to unique voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    pub coords: Vec<VoxelCoord>,
    /// One row per coordinate.
    pub features: Matrix,
    pub voxel_size: f64,
    pub stride: i32,
}

impl SparseVoxelTensor {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.features.cols
    }

    pub fn index(&self) -> HashMap<VoxelCoord, usize> {
        self.coords.iter().enumerate().map(|(i, c)| (*c, i)).collect()
    }

    /// Number of distinct batch items, assuming dense ids `0..n`.
    pub fn batch_size(&self) -> usize {
        self.coords.iter().map(|c| c.batch as usize + 1).max().unwrap_or(0)
    }
}

/// Point-to-voxel assignment of one voxelization.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMap {
    pub point_to_voxel: Vec<usize>,
    pub voxel_to_points: Vec<Vec<usize>>,
}

fn quantize(p: Vec3, v: f64) -> [i32; 3] {
    [
        (p[0] / v).floor() as i32,
        (p[1] / v).floor() as i32,
        (p[2] / v).floor() as i32,
    ]
}

/// Floor-quantizes points to voxels of size `v`; each voxel's feature is the
/// mean color of its points. Voxels are sorted by coordinate.
pub fn voxelize(cloud: &ColoredCloud, v: f64) -> (SparseVoxelTensor, VoxelMap) {
    let (t, mut maps) = voxelize_batch(&[cloud], v);
    (t, maps.pop().unwrap())
}

/// Voxelizes several clouds into one tensor, cloud `b` getting batch id `b`.
/// The returned maps index into the shared voxel list.
pub fn voxelize_batch(clouds: &[&ColoredCloud], v: f64) -> (SparseVoxelTensor, Vec<VoxelMap>) {
    assert!(v > 0.0, "voxel size must be positive");
    let mut keyed: Vec<(VoxelCoord, usize, usize)> = Vec::new();
    for (b, cloud) in clouds.iter().enumerate() {
        for (i, p) in cloud.points.iter().enumerate() {
            let q = quantize(*p, v);
            keyed.push((
                VoxelCoord {
                    batch: b as u32,
                    i: q[0],
                    j: q[1],
                    k: q[2],
                },
                b,
                i,
            ));
        }
    }
    keyed.sort_unstable();
    let mut coords: Vec<VoxelCoord> = Vec::new();
    let mut maps: Vec<VoxelMap> = clouds
        .iter()
        .map(|c| VoxelMap {
            point_to_voxel: vec![usize::MAX; c.len()],
            voxel_to_points: Vec::new(),
        })
        .collect();
    let mut members: Vec<Vec<(usize, usize)>> = Vec::new();
    for (c, b, i) in keyed {
        if coords.last() != Some(&c) {
            coords.push(c);
            members.push(Vec::new());
        }
        members.last_mut().unwrap().push((b, i));
    }
    for m in &mut maps {
        m.voxel_to_points = vec![Vec::new(); coords.len()];
    }
    let mut features = Matrix::zeros(coords.len(), 3);
    for (vox, pts) in members.iter().enumerate() {
        let row = features.row_mut(vox);
        for &(b, i) in pts {
            let col = clouds[b].colors[i];
            row[0] += col[0];
            row[1] += col[1];
            row[2] += col[2];
            maps[b].point_to_voxel[i] = vox;
            maps[b].voxel_to_points[vox].push(i);
        }
        let n = pts.len() as f64;
        for x in row.iter_mut() {
            *x /= n;
        }
    }
    (
        SparseVoxelTensor {
            coords,
            features,
            voxel_size: v,
            stride: 1,
        },
        maps,
    )
}

/// Points within distance `s` of `center`, re-expressed relative to it.
pub fn support(cloud: &ColoredCloud, center: Vec3, s: f64) -> ColoredCloud {
    let mut out = ColoredCloud::default();
    for (p, c) in cloud.points.iter().zip(&cloud.colors) {
        if dist3(*p, center) <= s {
            out.points.push([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
            out.colors.push(*c);
        }
    }
    out
}

/// Kernel offsets of a cubic kernel of odd side `kernel`, lexicographic in
/// (dx, dy, dz).
pub fn kernel_offsets(kernel: usize) -> Vec<[i32; 3]> {
    assert!(kernel % 2 == 1, "kernel size must be odd");
    let r = (kernel / 2) as i32;
    let mut v = Vec::with_capacity(kernel.pow(3));
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                v.push([dx, dy, dz]);
            }
        }
    }
    v
}

/// Gather/scatter plan of one sparse convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub kernel: usize,
    pub offsets: Vec<[i32; 3]>,
    pub in_count: usize,
    pub out_coords: Vec<VoxelCoord>,
    pub out_stride: i32,
    /// For each kernel offset, the `(input row, output row)` pairs it connects.
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn out_count(&self) -> usize {
        self.out_coords.len()
    }

    /// `(offset index, input row)` pairs per output row.
    pub fn neighbors_per_output(&self) -> Vec<Vec<(usize, usize)>> {
        let mut per = vec![Vec::new(); self.out_count()];
        for (k, pairs) in self.pairs.iter().enumerate() {
            for &(i, o) in pairs {
                per[o as usize].push((k, i as usize));
            }
        }
        per
    }
}

/// Output coordinates after a stride-2 step and the parent row of every input.
pub fn downsample_coords(coords: &[VoxelCoord], stride: i32) -> (Vec<VoxelCoord>, Vec<usize>) {
    let mut out: Vec<VoxelCoord> = coords.iter().map(|c| c.downsampled(stride)).collect();
    out.sort_unstable();
    out.dedup();
    let idx: HashMap<VoxelCoord, usize> = out.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let parent = coords.iter().map(|c| idx[&c.downsampled(stride)]).collect();
    (out, parent)
}

/// Builds the rulebook for a `kernel`-sized convolution with stride 1 or 2.
///
/// Stride 1 keeps the input coordinates. Stride 2 outputs the unique
/// floor-halved coordinates; the kernel footprint is centered on each output
/// coordinate with offsets scaled by the input stride.
pub fn kernel_neighbors(coords: &[VoxelCoord], in_stride: i32, kernel: usize, stride: usize) -> Rulebook {
    assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
    let offsets = kernel_offsets(kernel);
    let index: HashMap<VoxelCoord, usize> = coords.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let (out_coords, out_stride) = if stride == 1 {
        (coords.to_vec(), in_stride)
    } else {
        (downsample_coords(coords, in_stride).0, in_stride * 2)
    };
    let mut pairs = vec![Vec::new(); offsets.len()];
    for (o, oc) in out_coords.iter().enumerate() {
        for (k, d) in offsets.iter().enumerate() {
            if let Some(&i) = index.get(&oc.offset(*d, in_stride)) {
                pairs[k].push((i as u32, o as u32));
            }
        }
    }
    Rulebook {
        kernel,
        offsets,
        in_count: coords.len(),
        out_coords,
        out_stride,
        pairs,
    }
}
