use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{seeded_rng, LinearStack};
use crate::projection::PointRecord;

/// Greedy farthest-point sampling of `s` indices starting at index 0.
///
/// Each step takes the point with the largest squared distance to the chosen
/// set, lowest index on ties. With fewer than `s` points every point is taken
/// once and the remainder is drawn with replacement from `seed`. Returns
/// `None` for an empty input.
pub fn fps(points: &[[f64; 3]], s: usize, seed: u64) -> Option<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return None;
    }
    let take = s.min(n);
    let mut chosen = Vec::with_capacity(s);
    let mut dist = vec![f64::INFINITY; n];
    let mut current = 0;
    for _ in 0..take {
        chosen.push(current);
        let c = points[current];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best_d {
                best_d = dist[i];
                best = i;
            }
        }
        current = best;
    }
    if take < s {
        let mut rng = seeded_rng(seed);
        chosen.extend((take..s).map(|_| rng.random_range(0..n)));
    }
    Some(chosen)
}

/// Projection plane used to lay points out per proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    /// Bird's-eye view from LiDAR `(x, y)`.
    Bev,
    /// Camera view from pixel `(u, v)`.
    Cam,
}

/// Integer `(row, col)` of each `(proposal, point)` pair. The proposal number
/// is 1-based and offsets the row by `proposal * height`.
///
/// The in-block row is `floor(scale * x)` for [`View::Bev`] and `floor(u)` for
/// [`View::Cam`]; it must land in `[0, height)`.
pub fn layout_2d(points: &[(usize, PointRecord)], view: View, height: usize, scale: f64) -> Result<Vec<[i64; 2]>> {
    let h = height as i64;
    points
        .iter()
        .map(|(r, p)| {
            if *r == 0 {
                return Err(Error::shape("proposal numbers start at 1"));
            }
            let (local, col) = match view {
                View::Bev => ((scale * p.x).floor(), (scale * p.y).floor()),
                View::Cam => (p.u.floor(), p.v.floor()),
            };
            let local = local as i64;
            if !(0..h).contains(&local) {
                return Err(Error::LayoutOverflow {
                    proposal: *r,
                    local,
                    height: h,
                });
            }
            Ok([*r as i64 * h + local, col as i64])
        })
        .collect()
}

/// Occupied pixels after collision handling: the point nearest the sensor
/// wins a shared pixel, lower index on ties.
#[derive(Debug, Clone, Default)]
pub struct PixelPlane {
    occupant: HashMap<[i64; 2], usize>,
    feats: Vec<[f64; 9]>,
}

impl PixelPlane {
    pub fn build(cells: &[[i64; 2]], points: &[PointRecord]) -> Result<Self> {
        if cells.len() != points.len() {
            return Err(Error::shape("one cell per point required"));
        }
        let range = |p: &PointRecord| p.x * p.x + p.y * p.y + p.z * p.z;
        let mut occupant: HashMap<[i64; 2], usize> = HashMap::new();
        for (i, (c, p)) in cells.iter().zip(points).enumerate() {
            occupant
                .entry(*c)
                .and_modify(|j| {
                    if range(p) < range(&points[*j]) {
                        *j = i;
                    }
                })
                .or_insert(i);
        }
        Ok(Self {
            occupant,
            feats: points.iter().map(|p| p.channels()).collect(),
        })
    }

    pub fn occupant(&self, cell: [i64; 2]) -> Option<usize> {
        self.occupant.get(&cell).copied()
    }

    /// Indices of points that own their pixel, ascending.
    pub fn survivors(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.occupant.values().copied().collect();
        v.sort_unstable();
        v
    }
}

/// The `k x k` window around `cell`, row-major, nine channels per pixel,
/// zeros where a pixel is empty.
pub fn aggregate_kxk(plane: &PixelPlane, cell: [i64; 2], k: usize) -> Result<Vec<f64>> {
    if k % 2 == 0 {
        return Err(Error::config(format!("window size {k} must be odd")));
    }
    let r = (k / 2) as i64;
    let mut out = Vec::with_capacity(9 * k * k);
    for dr in -r..=r {
        for dc in -r..=r {
            match plane.occupant([cell[0] + dr, cell[1] + dc]) {
                Some(i) => out.extend_from_slice(&plane.feats[i]),
                None => out.extend_from_slice(&[0.0; 9]),
            }
        }
    }
    Ok(out)
}

/// Shared per-point MLP, channel-wise max over points, then an output MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct SetAbstraction {
    pub shared: LinearStack,
    pub out: LinearStack,
}

impl SetAbstraction {
    pub fn new(shared: LinearStack, out: LinearStack) -> Result<Self> {
        if shared.out_dim() != out.in_dim() {
            return Err(Error::shape("set abstraction stages do not chain"));
        }
        Ok(Self { shared, out })
    }

    pub fn in_dim(&self) -> usize {
        self.shared.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out.out_dim()
    }
}

/// Encodes exactly `s` sampled point features into one vector.
pub fn point_pool(features: &[Vec<f64>], s: usize, sa: &SetAbstraction) -> Result<Vec<f64>> {
    if features.len() != s || s == 0 {
        return Err(Error::shape(format!("point pooling expects {s} features, got {}", features.len())));
    }
    let mut pooled = vec![f64::NEG_INFINITY; sa.shared.out_dim()];
    for f in features {
        for (a, v) in pooled.iter_mut().zip(sa.shared.forward(f)?) {
            *a = a.max(v);
        }
    }
    sa.out.forward(&pooled)
}
