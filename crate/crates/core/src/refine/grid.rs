use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::nn::LinearStack;
use crate::voxel::SparseTensor;

/// Uniform hash over voxel centers with cells one radius wide.
#[derive(Debug, Clone)]
pub struct BallIndex {
    radius: f64,
    centers: Vec<[f64; 3]>,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl BallIndex {
    pub fn new(tensor: &SparseTensor, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::config("ball query radius must be positive"));
        }
        let centers: Vec<[f64; 3]> = tensor.coords.iter().map(|&c| tensor.spec.center_of(c)).collect();
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in centers.iter().enumerate() {
            cells.entry(Self::cell_of(p, radius)).or_default().push(i);
        }
        Ok(Self { radius, centers, cells })
    }

    fn cell_of(p: &[f64; 3], radius: f64) -> [i64; 3] {
        [
            (p[0] / radius).floor() as i64,
            (p[1] / radius).floor() as i64,
            (p[2] / radius).floor() as i64,
        ]
    }

    /// Indices of centers within `radius` of `q` (inclusive), ascending.
    pub fn query(&self, q: [f64; 3]) -> Vec<usize> {
        if q.iter().any(|v| !v.is_finite()) {
            return Vec::new();
        }
        let c = Self::cell_of(&q, self.radius);
        let r2 = self.radius * self.radius;
        let mut out = Vec::new();
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(list) = self.cells.get(&[c[0].saturating_add(dx), c[1].saturating_add(dy), c[2].saturating_add(dz)]) {
                        for &i in list {
                            let p = self.centers[i];
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                            if d2 <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// The `m^3` grid points of a box, x fastest, then y, then z.
pub fn grid_points(proposal: &Box3D, m: usize) -> Vec<[f64; 3]> {
    let size = proposal.size();
    let frac = |i: usize| (i as f64 + 0.5) / m as f64 - 0.5;
    let mut out = Vec::with_capacity(m * m * m);
    for iz in 0..m {
        for iy in 0..m {
            for ix in 0..m {
                out.push(proposal.to_world([frac(ix) * size[0], frac(iy) * size[1], frac(iz) * size[2]]));
            }
        }
    }
    out
}

/// Max-pools voxel features around each grid point of the proposal and maps
/// the concatenated `m^3 * channels` vector through `mlp`.
pub fn grid_pool(tensor: &SparseTensor, proposal: &Box3D, m: usize, radius: f64, mlp: &LinearStack) -> Result<Vec<f64>> {
    grid_pool_indexed(tensor, &BallIndex::new(tensor, radius)?, proposal, m, mlp)
}

/// [`grid_pool`] with a prebuilt index, shared across proposals.
pub fn grid_pool_indexed(
    tensor: &SparseTensor,
    index: &BallIndex,
    proposal: &Box3D,
    m: usize,
    mlp: &LinearStack,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::config("grid resolution must be at least 1"));
    }
    let c = tensor.channels;
    let mut pooled = vec![0.0; m * m * m * c];
    for (g, q) in grid_points(proposal, m).into_iter().enumerate() {
        let hits = index.query(q);
        if hits.is_empty() {
            continue;
        }
        let slot = &mut pooled[g * c..(g + 1) * c];
        slot.fill(f64::NEG_INFINITY);
        for i in hits {
            for (a, v) in slot.iter_mut().zip(tensor.feat(i)) {
                *a = a.max(*v);
            }
        }
    }
    mlp.forward(&pooled)
}
