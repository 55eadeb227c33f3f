//! All weights of one detector and their layout in a [`WeightBundle`].
//!
//! Tensor names:
//!
//! | name | content |
//! |---|---|
//! | `resvc.{b}.subm`, `resvc.{b}.sp3d`, `resvc.{b}.conv2d` | raw-branch block `b` kernels |
//! | `s2d.{b}.enc.{l}.down`, `s2d.{b}.enc.{l}.subm`, `s2d.{b}.dec.{l}` | pseudo-branch block `b`, level `l` |
//! | `refine.{t}.grid_raw`, `refine.{t}.grid_pseudo` | grid pooling MLPs of iteration `t` (1-based) |
//! | `refine.{t}.attn_raw.{q,k,v}`, `refine.{t}.attn_pseudo.{q,k,v}` | attention projections |
//! | `refine.{t}.sa.shared`, `refine.{t}.sa.out` | point set abstraction |
//! | `refine.{t}.{combined,voxel,point}.{reg,cls,iou}` | heads |
//!
//! Kernels store `.weight` and `.bias`; MLP stacks store `.{i}.weight` and
//! `.{i}.bias` per layer.

use rand::Rng;

use crate::config::{BackboneConfig, RunConfig};
use crate::error::{Error, Result};
use crate::nn::{seeded_rng, LinearStack};
use crate::projection::PointRecord;
use crate::refine::{AttentionWeights, BranchHeads, IterationWeights, SetAbstraction};
use crate::sparse::{ConvKernel, DofeParams, ResVcBlock};
use crate::weights::WeightBundle;

/// Encoder downsampling stride of the pseudo branch.
pub const DOFE_STRIDE: usize = 2;

/// Factor applied to seeded regression heads. Untrained pooled features reach
/// magnitudes in the thousands; unscaled heads would fling boxes off the map.
pub const SEEDED_REGRESSION_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub resvc: Vec<ResVcBlock>,
    pub s2d: Vec<DofeParams>,
    pub refine: Vec<IterationWeights>,
}

/// Feature widths entering refinement: `(raw, pseudo)`.
pub fn branch_widths(b: &BackboneConfig) -> (usize, usize) {
    (b.raw_width, PointRecord::CHANNELS)
}

impl Model {
    /// Uniform fixture weights for `cfg`, drawn from `seed` in declaration order,
    /// with regression heads scaled by [`SEEDED_REGRESSION_SCALE`].
    pub fn seeded(cfg: &RunConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed);
        let b = &cfg.backbone;
        let k = b.kernel_size;
        let mut c = PointRecord::CHANNELS;
        let mut resvc = Vec::new();
        for _ in 0..b.resvc_blocks {
            resvc.push(ResVcBlock {
                subm: ConvKernel::seeded(3, k, 1, c, b.raw_width, &mut rng),
                sp3d: ConvKernel::seeded(3, k, 1, c, b.raw_width, &mut rng),
                factor: b.rsm_factor,
                conv2d: ConvKernel::seeded(2, k, 1, b.raw_width, b.raw_width, &mut rng),
            });
            c = b.raw_width;
        }
        let s2d = (0..b.dofe_blocks).map(|_| dofe_seeded(b, &mut rng)).collect();
        let (rw, pw) = branch_widths(b);
        let refine = (0..cfg.refine.iterations)
            .map(|_| {
                let mut w = IterationWeights::seeded(&cfg.refine, rw, pw, &mut rng);
                for h in [&mut w.combined, &mut w.voxel, &mut w.point] {
                    for l in &mut h.reg.layers {
                        l.weight.iter_mut().chain(&mut l.bias).for_each(|v| *v *= SEEDED_REGRESSION_SCALE);
                    }
                }
                w
            })
            .collect();
        Self { resvc, s2d, refine }
    }

    /// Zeroes every regression head, leaving proposals where they are.
    pub fn zero_regression(&mut self) {
        for w in &mut self.refine {
            for h in [&mut w.combined, &mut w.voxel, &mut w.point] {
                let (i, o) = (h.reg.in_dim(), h.reg.out_dim());
                h.reg = LinearStack::zeros(&[i, o]);
            }
        }
    }

    pub fn to_bundle(&self) -> Result<WeightBundle> {
        let mut wb = WeightBundle::new();
        for (i, blk) in self.resvc.iter().enumerate() {
            wb.insert_kernel(&format!("resvc.{i}.subm"), &blk.subm)?;
            wb.insert_kernel(&format!("resvc.{i}.sp3d"), &blk.sp3d)?;
            wb.insert_kernel(&format!("resvc.{i}.conv2d"), &blk.conv2d)?;
        }
        for (i, blk) in self.s2d.iter().enumerate() {
            for (l, (down, subm)) in blk.encoder.iter().enumerate() {
                wb.insert_kernel(&format!("s2d.{i}.enc.{l}.down"), down)?;
                wb.insert_kernel(&format!("s2d.{i}.enc.{l}.subm"), subm)?;
            }
            for (l, dec) in blk.decoder.iter().enumerate() {
                wb.insert_kernel(&format!("s2d.{i}.dec.{l}"), dec)?;
            }
        }
        for (t, w) in self.refine.iter().enumerate() {
            let p = format!("refine.{}", t + 1);
            wb.insert_stack(&format!("{p}.grid_raw"), &w.grid_raw)?;
            wb.insert_stack(&format!("{p}.grid_pseudo"), &w.grid_pseudo)?;
            for (name, a) in [("attn_raw", &w.attn_raw), ("attn_pseudo", &w.attn_pseudo)] {
                wb.insert_linear(&format!("{p}.{name}.q"), &a.q)?;
                wb.insert_linear(&format!("{p}.{name}.k"), &a.k)?;
                wb.insert_linear(&format!("{p}.{name}.v"), &a.v)?;
            }
            wb.insert_stack(&format!("{p}.sa.shared"), &w.sa.shared)?;
            wb.insert_stack(&format!("{p}.sa.out"), &w.sa.out)?;
            for (name, h) in [("combined", &w.combined), ("voxel", &w.voxel), ("point", &w.point)] {
                wb.insert_stack(&format!("{p}.{name}.reg"), &h.reg)?;
                wb.insert_stack(&format!("{p}.{name}.cls"), &h.cls)?;
                wb.insert_stack(&format!("{p}.{name}.iou"), &h.iou)?;
            }
        }
        Ok(wb)
    }

    /// Reads the weights `cfg` calls for and checks they chain. Extra tensors
    /// are an error.
    pub fn from_bundle(wb: &WeightBundle, cfg: &RunConfig) -> Result<Self> {
        let b = &cfg.backbone;
        let mut used = 0usize;
        let mut kernel = |name: String, stride: usize| {
            used += 2;
            wb.kernel(&name, stride)
        };
        let mut resvc = Vec::new();
        for i in 0..b.resvc_blocks {
            resvc.push(ResVcBlock {
                subm: kernel(format!("resvc.{i}.subm"), 1)?,
                sp3d: kernel(format!("resvc.{i}.sp3d"), 1)?,
                factor: b.rsm_factor,
                conv2d: kernel(format!("resvc.{i}.conv2d"), 1)?,
            });
        }
        let mut s2d = Vec::new();
        for i in 0..b.dofe_blocks {
            let mut encoder = Vec::new();
            let mut decoder = Vec::new();
            for l in 0..b.dofe_depth {
                encoder.push((
                    kernel(format!("s2d.{i}.enc.{l}.down"), DOFE_STRIDE)?,
                    kernel(format!("s2d.{i}.enc.{l}.subm"), 1)?,
                ));
                decoder.push(kernel(format!("s2d.{i}.dec.{l}"), DOFE_STRIDE)?);
            }
            s2d.push(DofeParams { encoder, decoder });
        }
        let mut refine = Vec::new();
        for t in 1..=cfg.refine.iterations {
            let p = format!("refine.{t}");
            let mut stack = |name: &str| -> Result<LinearStack> {
                let s = wb.stack(&format!("{p}.{name}"))?;
                used += 2 * s.layers.len();
                Ok(s)
            };
            let grid_raw = stack("grid_raw")?;
            let grid_pseudo = stack("grid_pseudo")?;
            let sa = SetAbstraction::new(stack("sa.shared")?, stack("sa.out")?)?;
            let mut heads = |name: &str| -> Result<BranchHeads> {
                Ok(BranchHeads {
                    reg: stack(&format!("{name}.reg"))?,
                    cls: stack(&format!("{name}.cls"))?,
                    iou: stack(&format!("{name}.iou"))?,
                })
            };
            let (combined, voxel, point) = (heads("combined")?, heads("voxel")?, heads("point")?);
            let mut attn = |name: &str| -> Result<AttentionWeights> {
                used += 6;
                AttentionWeights::new(
                    wb.linear(&format!("{p}.{name}.q"))?,
                    wb.linear(&format!("{p}.{name}.k"))?,
                    wb.linear(&format!("{p}.{name}.v"))?,
                )
            };
            let (attn_raw, attn_pseudo) = (attn("attn_raw")?, attn("attn_pseudo")?);
            refine.push(IterationWeights { grid_raw, grid_pseudo, attn_raw, attn_pseudo, sa, combined, voxel, point });
        }
        if used != wb.len() {
            return Err(Error::Weights(format!(
                "bundle holds {} tensors but the configuration uses {used}",
                wb.len()
            )));
        }
        let model = Self { resvc, s2d, refine };
        model.check(cfg)?;
        Ok(model)
    }

    /// Width checks that do not need scene data.
    pub fn check(&self, cfg: &RunConfig) -> Result<()> {
        let b = &cfg.backbone;
        let mut c = PointRecord::CHANNELS;
        for (i, blk) in self.resvc.iter().enumerate() {
            let k = [&blk.subm, &blk.sp3d];
            if k.iter().any(|k| k.c_in != c || k.c_out != b.raw_width) || blk.conv2d.c_in != b.raw_width {
                return Err(Error::Weights(format!("raw branch block {i} does not map width {c} to {}", b.raw_width)));
            }
            c = b.raw_width;
        }
        for (i, blk) in self.s2d.iter().enumerate() {
            let mut c = PointRecord::CHANNELS;
            for (l, ((down, subm), dec)) in blk.encoder.iter().zip(&blk.decoder).enumerate() {
                if down.c_in != c || subm.c_in != down.c_out || dec.c_in != subm.c_out || dec.c_out != c {
                    return Err(Error::Weights(format!("pseudo branch block {i} level {l} widths do not chain")));
                }
                c = subm.c_out;
            }
        }
        let (rw, pw) = branch_widths(b);
        let m3 = cfg.refine.grid.pow(3);
        for (t, w) in self.refine.iter().enumerate() {
            if w.grid_raw.in_dim() != m3 * rw || w.grid_pseudo.in_dim() != m3 * pw {
                return Err(Error::Weights(format!("iteration {} grid MLPs do not match m^3 x branch width", t + 1)));
            }
        }
        if self.refine.len() != cfg.refine.iterations {
            return Err(Error::Weights("one refinement weight set per iteration is required".into()));
        }
        Ok(())
    }
}

fn dofe_seeded(b: &BackboneConfig, rng: &mut impl Rng) -> DofeParams {
    let k = b.kernel_size;
    let mut widths = vec![PointRecord::CHANNELS];
    widths.extend(std::iter::repeat_n(b.dofe_width, b.dofe_depth));
    let encoder = widths
        .windows(2)
        .map(|w| {
            (
                ConvKernel::seeded(3, k, DOFE_STRIDE, w[0], w[1], rng),
                ConvKernel::seeded(3, k, 1, w[1], w[1], rng),
            )
        })
        .collect();
    let decoder = widths
        .windows(2)
        .map(|w| ConvKernel::seeded(3, k, DOFE_STRIDE, w[1], w[0], rng))
        .collect();
    DofeParams { encoder, decoder }
}
