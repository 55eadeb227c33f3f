//! Iterative voxel-point proposal refinement.
//!
//! Each iteration pools the raw and pseudo voxel tensors on an `m^3` grid
//! inside every proposal, lets each pooled feature attend over the proposal's
//! earlier pooled features, and pools a farthest-point sample of the points
//! inside the proposal after a `k x k` neighborhood aggregation on a 2D
//! layout. Three heads read the combined, voxel-only and point-only features;
//! the combined head's residual moves the proposal for the next iteration.

mod attention;
mod grid;
mod points;

use rand::Rng;
use rayon::prelude::*;

pub use attention::{cross_attention, positional_encoding, AttentionWeights, SharedGroup};
pub use grid::{grid_points, grid_pool, grid_pool_indexed, BallIndex};
pub use points::{aggregate_kxk, fps, layout_2d, point_pool, PixelPlane, SetAbstraction, View};

use crate::error::{Error, Result};
use crate::geometry::{decode_residual, Box3D, Residual};
use crate::nn::{sigmoid, LinearStack};
use crate::projection::PointRecord;
use crate::voxel::SparseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RefineConfig {
    /// Refinement iterations `T`.
    pub iterations: usize,
    /// Points sampled per proposal `s`.
    pub samples: usize,
    /// Grid resolution `m`.
    pub grid: usize,
    /// Pooled voxel feature width `C`.
    pub channels: usize,
    /// Ball query radius (m).
    pub radius: f64,
    /// Aggregation window `k`.
    pub window: usize,
    pub h_bev: usize,
    pub h_cam: usize,
    /// BEV layout resolution (pixels per meter).
    pub bev_scale: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            samples: 128,
            grid: 6,
            channels: 96,
            radius: 0.4,
            window: 3,
            h_bev: 800,
            h_cam: 1280,
            bev_scale: 10.0,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.samples == 0 || self.grid == 0 || self.channels == 0 {
            return Err(Error::config("iterations, samples, grid and channels must be positive"));
        }
        if self.window % 2 == 0 {
            return Err(Error::config("aggregation window must be odd"));
        }
        if !(self.radius > 0.0) || !(self.bev_scale > 0.0) || self.h_bev == 0 || self.h_cam == 0 {
            return Err(Error::config("radius, layout scale and view heights must be positive"));
        }
        Ok(())
    }
}

/// A box being refined; its 1-based number is its position in the list plus one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: Box3D,
    pub class_id: usize,
}

/// Regression, classification and IoU heads fed by one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchHeads {
    pub reg: LinearStack,
    pub cls: LinearStack,
    pub iou: LinearStack,
}

impl BranchHeads {
    pub fn seeded(width: usize, rng: &mut impl Rng) -> Self {
        Self {
            reg: LinearStack::seeded(&[width, 7], rng),
            cls: LinearStack::seeded(&[width, 1], rng),
            iou: LinearStack::seeded(&[width, 1], rng),
        }
    }

    pub fn zeros(width: usize) -> Self {
        Self {
            reg: LinearStack::zeros(&[width, 7]),
            cls: LinearStack::zeros(&[width, 1]),
            iou: LinearStack::zeros(&[width, 1]),
        }
    }

    fn check(&self, width: usize, name: &str) -> Result<()> {
        let ok = self.reg.in_dim() == width
            && self.cls.in_dim() == width
            && self.iou.in_dim() == width
            && self.reg.out_dim() == 7
            && self.cls.out_dim() == 1
            && self.iou.out_dim() == 1;
        if !ok {
            return Err(Error::shape(format!("{name} heads must map width {width} to 7, 1 and 1")));
        }
        Ok(())
    }

    fn predict(&self, f: &[f64]) -> Result<(Residual, f64, f64)> {
        let r = self.reg.forward(f)?;
        let residual: Residual = r.try_into().expect("checked width");
        Ok((residual, sigmoid(self.cls.forward(f)?[0]), sigmoid(self.iou.forward(f)?[0])))
    }
}

/// Weights of one refinement iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationWeights {
    pub grid_raw: LinearStack,
    pub grid_pseudo: LinearStack,
    pub attn_raw: AttentionWeights,
    pub attn_pseudo: AttentionWeights,
    pub sa: SetAbstraction,
    /// Heads on the combined feature; their residual moves the proposals.
    pub combined: BranchHeads,
    pub voxel: BranchHeads,
    pub point: BranchHeads,
}

impl IterationWeights {
    /// Uniform fixture weights for tensors of the given widths.
    pub fn seeded(cfg: &RefineConfig, raw_channels: usize, pseudo_channels: usize, rng: &mut impl Rng) -> Self {
        let m3 = cfg.grid.pow(3);
        let c = cfg.channels;
        let point_in = 9 * cfg.window * cfg.window;
        Self {
            grid_raw: LinearStack::seeded(&[m3 * raw_channels, c], rng),
            grid_pseudo: LinearStack::seeded(&[m3 * pseudo_channels, c], rng),
            attn_raw: AttentionWeights::seeded(c, c, c, rng),
            attn_pseudo: AttentionWeights::seeded(c, c, c, rng),
            sa: SetAbstraction {
                shared: LinearStack::seeded(&[point_in, c], rng),
                out: LinearStack::seeded(&[c, c], rng),
            },
            combined: BranchHeads::seeded(3 * c, rng),
            voxel: BranchHeads::seeded(2 * c, rng),
            point: BranchHeads::seeded(c, rng),
        }
    }

    pub fn voxel_width(&self) -> usize {
        self.attn_raw.out_dim() + self.attn_pseudo.out_dim()
    }

    pub fn point_width(&self) -> usize {
        self.sa.out_dim()
    }

    fn check(&self, cfg: &RefineConfig, inputs: &RefineInputs) -> Result<()> {
        let m3 = cfg.grid.pow(3);
        if self.grid_raw.in_dim() != m3 * inputs.raw_voxels.channels
            || self.grid_pseudo.in_dim() != m3 * inputs.pseudo_voxels.channels
        {
            return Err(Error::shape("grid MLP input width must be m^3 times the tensor width"));
        }
        if self.grid_raw.out_dim() != self.attn_raw.in_dim() || self.grid_pseudo.out_dim() != self.attn_pseudo.in_dim() {
            return Err(Error::shape("grid MLP output must feed the attention layer"));
        }
        if self.sa.in_dim() != 9 * cfg.window * cfg.window {
            return Err(Error::shape("set abstraction input must be 9 k^2 wide"));
        }
        let (v, p) = (self.voxel_width(), self.point_width());
        self.combined.check(v + p, "combined")?;
        self.voxel.check(v, "voxel")?;
        self.point.check(p, "point")
    }
}

/// Scene data every iteration reads.
pub struct RefineInputs<'a> {
    pub raw_voxels: &'a SparseTensor,
    pub pseudo_voxels: &'a SparseTensor,
    pub raw_points: &'a [PointRecord],
    pub pseudo_points: &'a [PointRecord],
    raw_index: BallIndex,
    pseudo_index: BallIndex,
}

impl<'a> RefineInputs<'a> {
    pub fn new(
        raw_voxels: &'a SparseTensor,
        pseudo_voxels: &'a SparseTensor,
        raw_points: &'a [PointRecord],
        pseudo_points: &'a [PointRecord],
        radius: f64,
    ) -> Result<Self> {
        Ok(Self {
            raw_voxels,
            pseudo_voxels,
            raw_points,
            pseudo_points,
            raw_index: BallIndex::new(raw_voxels, radius)?,
            pseudo_index: BallIndex::new(pseudo_voxels, radius)?,
        })
    }
}

/// Proposals plus the two shared groups, carried between iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineState {
    pub proposals: Vec<Proposal>,
    pub raw_group: SharedGroup,
    pub pseudo_group: SharedGroup,
    /// Iterations completed so far.
    pub completed: usize,
}

impl RefineState {
    pub fn new(proposals: Vec<Proposal>, channels: usize) -> Self {
        let n = proposals.len();
        Self {
            proposals,
            raw_group: SharedGroup::new(n, channels),
            pseudo_group: SharedGroup::new(n, channels),
            completed: 0,
        }
    }
}

/// Per-proposal predictions of one head set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchOutput {
    pub residuals: Vec<Residual>,
    pub cls: Vec<f64>,
    pub iou: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutput {
    pub iteration: usize,
    /// Proposal boxes the iteration pooled from.
    pub input_boxes: Vec<Box3D>,
    pub f: Vec<Vec<f64>>,
    pub f_v: Vec<Vec<f64>>,
    pub f_p: Vec<Vec<f64>>,
    pub combined: BranchOutput,
    pub voxel: BranchOutput,
    pub point: BranchOutput,
}

fn inside(points: &[PointRecord], boxes: &[Box3D]) -> Vec<(usize, PointRecord)> {
    let mut out = Vec::new();
    for (r, b) in boxes.iter().enumerate() {
        for p in points {
            if b.contains(p.xyz()) {
                out.push((r + 1, *p));
            }
        }
    }
    out
}

/// Point-path features per proposal: lay out, aggregate, sample, pool.
pub fn point_features(
    boxes: &[Box3D],
    raw_points: &[PointRecord],
    pseudo_points: &[PointRecord],
    sa: &SetAbstraction,
    cfg: &RefineConfig,
    iteration: usize,
) -> Result<Vec<Vec<f64>>> {
    let raw = inside(raw_points, boxes);
    let pseudo = inside(pseudo_points, boxes);
    let raw_cells = layout_2d(&raw, View::Bev, cfg.h_bev, cfg.bev_scale)?;
    let pseudo_cells = layout_2d(&pseudo, View::Cam, cfg.h_cam, 1.0)?;
    let raw_recs: Vec<PointRecord> = raw.iter().map(|(_, p)| *p).collect();
    let pseudo_recs: Vec<PointRecord> = pseudo.iter().map(|(_, p)| *p).collect();
    let planes = [
        (PixelPlane::build(&raw_cells, &raw_recs)?, &raw, &raw_cells),
        (PixelPlane::build(&pseudo_cells, &pseudo_recs)?, &pseudo, &pseudo_cells),
    ];

    // Survivors per proposal, raw before pseudo, by index.
    let mut members: Vec<Vec<(usize, usize)>> = vec![Vec::new(); boxes.len()];
    for (view, (plane, pairs, _)) in planes.iter().enumerate() {
        for i in plane.survivors() {
            members[pairs[i].0 - 1].push((view, i));
        }
    }

    members
        .into_par_iter()
        .enumerate()
        .map(|(r, mut list)| {
            if list.is_empty() {
                return Ok(vec![0.0; sa.out_dim()]);
            }
            let xyz = |&(view, i): &(usize, usize)| planes[view].1[i].1.xyz();
            list.sort_by(|a, b| {
                let (pa, pb) = (xyz(a), xyz(b));
                pa[0].total_cmp(&pb[0])
                    .then(pa[1].total_cmp(&pb[1]))
                    .then(pa[2].total_cmp(&pb[2]))
                    .then(a.cmp(b))
            });
            let coords: Vec<[f64; 3]> = list.iter().map(xyz).collect();
            let seed = cfg.seed ^ ((iteration as u64) << 32) ^ (r as u64 + 1);
            let picks = fps(&coords, cfg.samples, seed).expect("non-empty");
            let feats = picks
                .iter()
                .map(|&k| {
                    let (view, i) = list[k];
                    let (plane, _, cells) = &planes[view];
                    aggregate_kxk(plane, cells[i], cfg.window)
                })
                .collect::<Result<Vec<_>>>()?;
            point_pool(&feats, cfg.samples, sa)
        })
        .collect()
}

fn pooled(tensor: &SparseTensor, index: &BallIndex, boxes: &[Box3D], m: usize, mlp: &LinearStack) -> Result<Vec<Vec<f64>>> {
    boxes
        .par_iter()
        .map(|b| grid_pool_indexed(tensor, index, b, m, mlp))
        .collect()
}

fn run_heads(heads: &BranchHeads, feats: &[Vec<f64>]) -> Result<BranchOutput> {
    let mut out = BranchOutput::default();
    for f in feats {
        let (r, c, i) = heads.predict(f)?;
        out.residuals.push(r);
        out.cls.push(c);
        out.iou.push(i);
    }
    Ok(out)
}

fn concat(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

/// Runs iteration `t` (1-based), which must follow the state's last one.
pub fn refine_iteration(
    state: &mut RefineState,
    inputs: &RefineInputs,
    weights: &IterationWeights,
    cfg: &RefineConfig,
    t: usize,
) -> Result<IterationOutput> {
    cfg.validate()?;
    if t == 0 || t > cfg.iterations || t != state.completed + 1 {
        return Err(Error::config(format!(
            "iteration {t} cannot follow {} of {}",
            state.completed, cfg.iterations
        )));
    }
    weights.check(cfg, inputs)?;
    let boxes: Vec<Box3D> = state.proposals.iter().map(|p| p.bbox).collect();

    let g_raw = pooled(inputs.raw_voxels, &inputs.raw_index, &boxes, cfg.grid, &weights.grid_raw)?;
    let g_pseudo = pooled(inputs.pseudo_voxels, &inputs.pseudo_index, &boxes, cfg.grid, &weights.grid_pseudo)?;
    let (f_rv, _) = cross_attention(&g_raw, &state.raw_group, &weights.attn_raw)?;
    let (f_pv, _) = cross_attention(&g_pseudo, &state.pseudo_group, &weights.attn_pseudo)?;
    let f_v = concat(&f_rv, &f_pv);
    let f_p = point_features(&boxes, inputs.raw_points, inputs.pseudo_points, &weights.sa, cfg, t)?;
    let f = concat(&f_v, &f_p);
    debug_assert!(f.iter().all(|x| x.len() == weights.voxel_width() + weights.point_width()));

    let combined = run_heads(&weights.combined, &f)?;
    let voxel = run_heads(&weights.voxel, &f_v)?;
    let point = run_heads(&weights.point, &f_p)?;

    for (p, r) in state.proposals.iter_mut().zip(&combined.residuals) {
        p.bbox = decode_residual(&p.bbox, r);
    }
    state.raw_group.push(g_raw)?;
    state.pseudo_group.push(g_pseudo)?;
    state.completed = t;
    Ok(IterationOutput {
        iteration: t,
        input_boxes: boxes,
        f,
        f_v,
        f_p,
        combined,
        voxel,
        point,
    })
}

/// All `T` iterations; `weights[t - 1]` drives iteration `t`.
pub fn refine(
    proposals: Vec<Proposal>,
    inputs: &RefineInputs,
    weights: &[IterationWeights],
    cfg: &RefineConfig,
) -> Result<(RefineState, Vec<IterationOutput>)> {
    if weights.len() != cfg.iterations {
        return Err(Error::config(format!(
            "{} iteration weight sets for {} iterations",
            weights.len(),
            cfg.iterations
        )));
    }
    let width = weights.first().map_or(cfg.channels, |w| w.attn_raw.in_dim());
    let mut state = RefineState::new(proposals, width);
    let mut outputs = Vec::with_capacity(cfg.iterations);
    for (i, w) in weights.iter().enumerate() {
        outputs.push(refine_iteration(&mut state, inputs, w, cfg, i + 1)?);
    }
    Ok((state, outputs))
}
