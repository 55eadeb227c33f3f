use std::collections::HashMap;

use super::{downsample, inverse_conv3d, sparse_conv3d, subm_conv2d, subm_conv3d, ConvKernel, SparseTensor2D};
use crate::error::{Error, Result};
use crate::nn::layer_norm;
use crate::projection::ProjectionModel;
use crate::voxel::SparseTensor;

/// Residual sparse module: `SubM(t) + Sp3D(Down(t))`, with the coarse branch
/// read back at each fine voxel's parent cell. Output coords are `t`'s coords.
pub fn rsm_block(t: &SparseTensor, k_subm: &ConvKernel, k_sp3d: &ConvKernel, factor: usize) -> Result<SparseTensor> {
    if k_subm.c_out != k_sp3d.c_out {
        return Err(Error::shape(format!(
            "residual branches disagree on width: {} vs {}",
            k_subm.c_out, k_sp3d.c_out
        )));
    }
    let fine = subm_conv3d(t, k_subm)?;
    let coarse = sparse_conv3d(&downsample(t, factor)?, k_sp3d)?;
    let step = (factor * k_sp3d.stride) as i32;
    let index = coarse.index_map();
    let mut out = fine;
    for i in 0..out.len() {
        let p = out.coords[i];
        let parent = [p[0].div_euclid(step), p[1].div_euclid(step), p[2].div_euclid(step)];
        if let Some(&j) = index.get(&parent) {
            for (a, b) in out.feat_mut(i).iter_mut().zip(coarse.feat(j)) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// Image-plane raster used by the voxel-to-image interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    /// Cell edge length in pixels.
    pub cell_px: f64,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, cell_px: f64) -> Result<Self> {
        if width == 0 || height == 0 || !(cell_px > 0.0 && cell_px.is_finite()) {
            return Err(Error::config("image grid needs positive width, height and cell size"));
        }
        Ok(Self { width, height, cell_px })
    }

    pub fn dims(&self) -> [usize; 2] {
        [
            (self.width as f64 / self.cell_px).ceil() as usize,
            (self.height as f64 / self.cell_px).ceil() as usize,
        ]
    }

    /// Cell hit by image point `(u, v)`; `None` outside the image.
    pub fn cell(&self, u: f64, v: f64) -> Option<[i32; 2]> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return None;
        }
        Some([(u / self.cell_px).floor() as i32, (v / self.cell_px).floor() as i32])
    }
}

/// Projects voxel centers into the image and mean-merges features per cell.
/// The second value maps each voxel to its row in the 2D tensor, if any.
pub fn rasterize_to_image(
    t: &SparseTensor,
    model: &ProjectionModel,
    grid: &ImageGrid,
) -> Result<(SparseTensor2D, Vec<Option<usize>>)> {
    let c = t.channels;
    let mut slot: HashMap<[i32; 2], usize> = HashMap::new();
    let mut cells = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut owner = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        let ip = model.project(t.spec.center_of(t.coords[i]));
        let cell = if ip.in_front { grid.cell(ip.u, ip.v) } else { None };
        let Some(cell) = cell else {
            owner.push(None);
            continue;
        };
        let s = *slot.entry(cell).or_insert_with(|| {
            cells.push(cell);
            sums.extend(std::iter::repeat_n(0.0, c));
            counts.push(0);
            cells.len() - 1
        });
        for (a, v) in sums[s * c..(s + 1) * c].iter_mut().zip(t.feat(i)) {
            *a += v;
        }
        counts[s] += 1;
        owner.push(Some(s));
    }
    for (s, &n) in counts.iter().enumerate() {
        for a in &mut sums[s * c..(s + 1) * c] {
            *a /= n as f64;
        }
    }
    let map = SparseTensor2D::new(grid.dims(), c, cells.clone(), sums)?;
    // `new` re-sorts; translate slot numbers into sorted rows.
    let rows = map.index_map();
    let owner = owner.into_iter().map(|o| o.map(|s| rows[&cells[s]])).collect();
    Ok((map, owner))
}

/// Voxel-to-image residual: rasterize, 2D submanifold conv, gather back and add.
pub fn resnr_block(t: &SparseTensor, model: &ProjectionModel, k2d: &ConvKernel, grid: &ImageGrid) -> Result<SparseTensor> {
    if k2d.c_out != t.channels {
        return Err(Error::shape(format!(
            "image residual must keep width {}, kernel outputs {}",
            t.channels, k2d.c_out
        )));
    }
    let (map, owner) = rasterize_to_image(t, model, grid)?;
    let conv = subm_conv2d(&map, k2d)?;
    let mut out = t.clone();
    for (i, o) in owner.iter().enumerate() {
        if let Some(row) = o {
            for (a, b) in out.feat_mut(i).iter_mut().zip(conv.feat(*row)) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// Weights of one residual voxel-camera block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResVcBlock {
    pub subm: ConvKernel,
    pub sp3d: ConvKernel,
    pub factor: usize,
    pub conv2d: ConvKernel,
}

/// `n = blocks.len()` rounds of RSM followed by the image residual.
pub fn resvc_branch(t: &SparseTensor, blocks: &[ResVcBlock], model: &ProjectionModel, grid: &ImageGrid) -> Result<SparseTensor> {
    if blocks.is_empty() {
        return Err(Error::config("residual branch needs at least one block"));
    }
    let mut x = t.clone();
    for b in blocks {
        x = rsm_block(&x, &b.subm, &b.sp3d, b.factor)?;
        x = resnr_block(&x, model, &b.conv2d, grid)?;
    }
    Ok(x)
}

/// Encoder-decoder weights. Encoder level `l` is `(strided, subm)`; decoder
/// level `l` is the transposed kernel bringing level `l + 1` back to level `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct DofeParams {
    pub encoder: Vec<(ConvKernel, ConvKernel)>,
    pub decoder: Vec<ConvKernel>,
}

pub fn dofe_block(t: &SparseTensor, params: &DofeParams) -> Result<SparseTensor> {
    if params.encoder.len() != params.decoder.len() {
        return Err(Error::config(format!(
            "encoder depth {} does not match decoder depth {}",
            params.encoder.len(),
            params.decoder.len()
        )));
    }
    let mut levels = vec![t.clone()];
    for (down, subm) in &params.encoder {
        let x = sparse_conv3d(levels.last().unwrap(), down)?;
        levels.push(subm_conv3d(&x, subm)?);
    }
    let mut y = levels.pop().unwrap();
    for (skip, k) in levels.iter().zip(&params.decoder).rev() {
        let mut up = inverse_conv3d(&y, k, skip.spec, &skip.coords)?;
        if up.channels != skip.channels {
            return Err(Error::shape(format!(
                "decoder outputs width {}, skip has {}",
                up.channels, skip.channels
            )));
        }
        for (a, b) in up.feats.iter_mut().zip(&skip.feats) {
            *a += b;
        }
        for i in 0..up.len() {
            layer_norm(up.feat_mut(i));
        }
        y = up;
    }
    Ok(y)
}

pub fn s2d_branch(t: &SparseTensor, blocks: &[DofeParams]) -> Result<SparseTensor> {
    if blocks.is_empty() {
        return Err(Error::config("encoder-decoder branch needs at least one block"));
    }
    let mut x = t.clone();
    for b in blocks {
        x = dofe_block(&x, b)?;
    }
    Ok(x)
}

fn collapse_bev(t: &SparseTensor) -> HashMap<[i32; 2], Vec<f64>> {
    let mut cols: HashMap<[i32; 2], Vec<f64>> = HashMap::new();
    for i in 0..t.len() {
        let c = t.coords[i];
        let acc = cols.entry([c[0], c[1]]).or_insert_with(|| vec![0.0; t.channels]);
        for (a, v) in acc.iter_mut().zip(t.feat(i)) {
            *a += v;
        }
    }
    cols
}

/// Sums each tensor over height and concatenates `raw | pseudo` per BEV column.
pub fn fuse_bev(raw: &SparseTensor, pseudo: &SparseTensor) -> Result<SparseTensor2D> {
    if raw.spec != pseudo.spec {
        return Err(Error::shape("fused tensors must share a grid"));
    }
    let (cr, cp) = (raw.channels, pseudo.channels);
    let a = collapse_bev(raw);
    let b = collapse_bev(pseudo);
    let mut keys: Vec<[i32; 2]> = a.keys().chain(b.keys()).copied().collect();
    keys.sort_by_key(|k| (k[1], k[0]));
    keys.dedup();
    let mut feats = Vec::with_capacity(keys.len() * (cr + cp));
    for k in &keys {
        match a.get(k) {
            Some(f) => feats.extend_from_slice(f),
            None => feats.extend(std::iter::repeat_n(0.0, cr)),
        }
        match b.get(k) {
            Some(f) => feats.extend_from_slice(f),
            None => feats.extend(std::iter::repeat_n(0.0, cp)),
        }
    }
    SparseTensor2D::new([raw.spec.dims[0], raw.spec.dims[1]], cr + cp, keys, feats)
}
