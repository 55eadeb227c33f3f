//! Point cloud voxelization into sparse tensors.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::projection::{PointRange, PointRecord};

/// Integer voxel index `(ix, iy, iz)`.
pub type VoxelCoord = [i32; 3];

/// Default voxel edge lengths (m) for KITTI-scale scenes.
pub const DEFAULT_VOXEL_SIZE: [f64; 3] = [0.05, 0.05, 0.1];

/// Default cap on points averaged into one voxel.
pub const DEFAULT_MAX_POINTS_PER_VOXEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: [f64; 3],
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        if voxel_size.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("voxel sizes must be positive"));
        }
        if dims.contains(&0) || dims.iter().any(|&d| d > i32::MAX as usize / 4) {
            return Err(Error::config("grid dimensions must be positive and fit in i32"));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Grid covering `range` with the given voxel size.
    pub fn covering(range: &PointRange, voxel_size: [f64; 3]) -> Result<Self> {
        let mut dims = [0usize; 3];
        for k in 0..3 {
            let n = (range.max[k] - range.min[k]) / voxel_size[k];
            // Absorb representation error, e.g. 70.4 / 0.05 = 1408.0000000000002.
            dims[k] = (n - 1e-6).ceil().max(1.0) as usize;
        }
        Self::new(range.min, voxel_size, dims)
    }

    pub fn contains(&self, c: VoxelCoord) -> bool {
        (0..3).all(|k| c[k] >= 0 && (c[k] as usize) < self.dims[k])
    }

    pub fn index_of(&self, p: [f64; 3]) -> Option<VoxelCoord> {
        let mut c = [0i32; 3];
        for k in 0..3 {
            let f = ((p[k] - self.origin[k]) / self.voxel_size[k]).floor();
            if !(f >= 0.0 && f < self.dims[k] as f64) {
                return None;
            }
            c[k] = f as i32;
        }
        Some(c)
    }

    pub fn center_of(&self, c: VoxelCoord) -> [f64; 3] {
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = self.origin[k] + (c[k] as f64 + 0.5) * self.voxel_size[k];
        }
        p
    }

    /// The grid seen through a lattice of stride `factor`.
    pub fn coarsened(&self, factor: usize) -> Self {
        let f = factor as f64;
        Self {
            origin: self.origin,
            voxel_size: [self.voxel_size[0] * f, self.voxel_size[1] * f, self.voxel_size[2] * f],
            dims: [
                self.dims[0].div_ceil(factor),
                self.dims[1].div_ceil(factor),
                self.dims[2].div_ceil(factor),
            ],
        }
    }
}

/// Lexicographic (z, y, x) order used for every stored coordinate list.
pub fn canonical_key(c: &VoxelCoord) -> (i32, i32, i32) {
    (c[2], c[1], c[0])
}

/// Occupied voxels with fixed-width features, coordinates unique and sorted (z, y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor {
    pub spec: VoxelGridSpec,
    pub channels: usize,
    pub coords: Vec<VoxelCoord>,
    /// Row-major `coords.len() x channels`.
    pub feats: Vec<f64>,
}

impl SparseTensor {
    /// Builds a tensor, sorting into canonical order and validating the invariants.
    pub fn new(
        spec: VoxelGridSpec,
        channels: usize,
        coords: Vec<VoxelCoord>,
        feats: Vec<f64>,
    ) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::shape(format!(
                "{} coords with {channels} channels need {} features, got {}",
                coords.len(),
                coords.len() * channels,
                feats.len()
            )));
        }
        if let Some(c) = coords.iter().find(|c| !spec.contains(**c)) {
            return Err(Error::shape(format!("voxel {c:?} outside grid {:?}", spec.dims)));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| canonical_key(&coords[i]));
        if order
            .windows(2)
            .any(|w| coords[w[0]] == coords[w[1]])
        {
            return Err(Error::shape("duplicate voxel coordinates"));
        }
        let sorted_coords = order.iter().map(|&i| coords[i]).collect();
        let mut sorted_feats = Vec::with_capacity(feats.len());
        for &i in &order {
            sorted_feats.extend_from_slice(&feats[i * channels..(i + 1) * channels]);
        }
        Ok(Self {
            spec,
            channels,
            coords: sorted_coords,
            feats: sorted_feats,
        })
    }

    pub fn empty(spec: VoxelGridSpec, channels: usize) -> Self {
        Self {
            spec,
            channels,
            coords: Vec::new(),
            feats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feat(&self, i: usize) -> &[f64] {
        &self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn feat_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.feats[i * self.channels..(i + 1) * self.channels]
    }

    pub fn index_map(&self) -> HashMap<VoxelCoord, usize> {
        self.coords.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }

    /// Same coordinates, new features.
    pub fn with_feats(&self, channels: usize, feats: Vec<f64>) -> Self {
        debug_assert_eq!(feats.len(), self.len() * channels);
        Self {
            spec: self.spec,
            channels,
            coords: self.coords.clone(),
            feats,
        }
    }
}

/// How the points falling into one voxel are reduced to a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduce {
    #[default]
    Mean,
}

/// Groups points into voxels and averages the first `max_points_per_voxel`
/// nine-channel records of each voxel, in input order.
pub fn voxelize(
    points: &[PointRecord],
    spec: &VoxelGridSpec,
    max_points_per_voxel: usize,
    reduce: Reduce,
) -> Result<SparseTensor> {
    if max_points_per_voxel == 0 {
        return Err(Error::config("max_points_per_voxel must be at least 1"));
    }
    let Reduce::Mean = reduce;
    const C: usize = PointRecord::CHANNELS;
    let mut slots: HashMap<VoxelCoord, usize> = HashMap::new();
    let mut coords: Vec<VoxelCoord> = Vec::new();
    let mut sums: Vec<[f64; C]> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for p in points {
        let Some(c) = spec.index_of(p.xyz()) else {
            continue;
        };
        let slot = *slots.entry(c).or_insert_with(|| {
            coords.push(c);
            sums.push([0.0; C]);
            counts.push(0);
            coords.len() - 1
        });
        if counts[slot] < max_points_per_voxel {
            for (acc, v) in sums[slot].iter_mut().zip(p.channels()) {
                *acc += v;
            }
            counts[slot] += 1;
        }
    }
    let mut feats = Vec::with_capacity(coords.len() * C);
    for (sum, &n) in sums.iter().zip(&counts) {
        feats.extend(sum.iter().map(|s| s / n as f64));
    }
    SparseTensor::new(*spec, C, coords, feats)
}

/// Metric center of every occupied voxel, in tensor order.
pub fn devoxelize_centers(t: &SparseTensor) -> Vec<[f64; 3]> {
    t.coords.iter().map(|&c| t.spec.center_of(c)).collect()
}
