//! Sparse convolutions over voxel tensors and the backbone blocks built on them.
//!
//! Kernels are correlations: the output at site `o` reads the input at
//! `stride * o + offset` with the weight slice for `offset`. Offsets run over
//! `[-r, r]` per axis with `r = (kernel_size - 1) / 2`, enumerated x fastest.
//! Every output feature is accumulated in that fixed offset order, which keeps
//! results bit-identical no matter how outputs are distributed over threads.

mod blocks;

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;

pub use blocks::{
    dofe_block, fuse_bev, rasterize_to_image, resnr_block, resvc_branch, rsm_block, s2d_branch,
    DofeParams, ImageGrid, ResVcBlock,
};

use crate::error::{Error, Result};
use crate::nn::{uniform_vec, FIXTURE_WEIGHT_SCALE};
use crate::voxel::{canonical_key, SparseTensor, VoxelCoord, VoxelGridSpec};

/// Weights of a 2D or 3D sparse convolution, laid out `[offset][c_in][c_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub ndim: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(
        ndim: usize,
        kernel_size: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if ndim != 2 && ndim != 3 {
            return Err(Error::shape(format!("kernels are 2D or 3D, not {ndim}D")));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::shape(format!("kernel size {kernel_size} must be odd")));
        }
        if stride == 0 {
            return Err(Error::shape("stride must be at least 1"));
        }
        let volume = kernel_size.pow(ndim as u32);
        if weights.len() != volume * c_in * c_out || bias.len() != c_out {
            return Err(Error::shape(format!(
                "kernel {kernel_size}^{ndim} {c_in}->{c_out} needs {} weights and {c_out} biases, got {} and {}",
                volume * c_in * c_out,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::shape("kernel values must be finite"));
        }
        Ok(Self {
            ndim,
            kernel_size,
            stride,
            c_in,
            c_out,
            weights,
            bias,
        })
    }

    pub fn zeros(ndim: usize, kernel_size: usize, stride: usize, c_in: usize, c_out: usize) -> Self {
        let volume = kernel_size.pow(ndim as u32);
        Self {
            ndim,
            kernel_size,
            stride,
            c_in,
            c_out,
            weights: vec![0.0; volume * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    /// Identity on the center tap, zero elsewhere.
    pub fn identity(ndim: usize, kernel_size: usize, channels: usize) -> Self {
        let mut k = Self::zeros(ndim, kernel_size, 1, channels, channels);
        let center = k.volume() / 2;
        for c in 0..channels {
            k.weights[(center * channels + c) * channels + c] = 1.0;
        }
        k
    }

    /// Uniform `[-0.1, 0.1]` weights and biases for fixtures.
    pub fn seeded(
        ndim: usize,
        kernel_size: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let volume = kernel_size.pow(ndim as u32);
        Self {
            ndim,
            kernel_size,
            stride,
            c_in,
            c_out,
            weights: uniform_vec(rng, volume * c_in * c_out, FIXTURE_WEIGHT_SCALE),
            bias: uniform_vec(rng, c_out, FIXTURE_WEIGHT_SCALE),
        }
    }

    pub fn volume(&self) -> usize {
        self.kernel_size.pow(self.ndim as u32)
    }

    pub fn radius(&self) -> i32 {
        (self.kernel_size as i32 - 1) / 2
    }

    /// `[c_in][c_out]` block for offset index `o`.
    pub fn tap(&self, o: usize) -> &[f64] {
        let n = self.c_in * self.c_out;
        &self.weights[o * n..(o + 1) * n]
    }

    /// Offsets in weight order, as `(dx, dy, dz)`; 2D kernels report `dz = 0`.
    pub fn offsets(&self) -> Vec<[i32; 3]> {
        let r = self.radius();
        let mut out = Vec::with_capacity(self.volume());
        let zr = if self.ndim == 3 { -r..=r } else { 0..=0 };
        for dz in zr {
            for dy in -r..=r {
                for dx in -r..=r {
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }

    fn check(&self, ndim: usize, channels: usize) -> Result<()> {
        if self.ndim != ndim {
            return Err(Error::shape(format!(
                "expected a {ndim}D kernel, got {}D",
                self.ndim
            )));
        }
        if self.c_in != channels {
            return Err(Error::shape(format!(
                "kernel expects {} input channels, tensor has {channels}",
                self.c_in
            )));
        }
        Ok(())
    }

    /// `acc += feat * tap(o)`.
    fn accumulate(&self, o: usize, feat: &[f64], acc: &mut [f64]) {
        let tap = self.tap(o);
        for (ci, &x) in feat.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &tap[ci * self.c_out..(ci + 1) * self.c_out];
            for (a, w) in acc.iter_mut().zip(row) {
                *a += x * w;
            }
        }
    }
}

/// Sparse 2D feature map over an image-plane cell grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor2D {
    pub dims: [usize; 2],
    pub channels: usize,
    /// `(iu, iv)`, unique, sorted by `(iv, iu)`.
    pub coords: Vec<[i32; 2]>,
    pub feats: Vec<f64>,
}

impl SparseTensor2D {
    pub fn new(dims: [usize; 2], channels: usize, coords: Vec<[i32; 2]>, feats: Vec<f64>) -> Result<Self> {
        if feats.len() != coords.len() * channels {
            return Err(Error::shape("2D tensor feature count does not match coordinates"));
        }
        if coords
            .iter()
            .any(|c| c[0] < 0 || c[1] < 0 || c[0] as usize >= dims[0] || c[1] as usize >= dims[1])
        {
            return Err(Error::shape("2D coordinate outside grid"));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| (coords[i][1], coords[i][0]));
        if order.windows(2).any(|w| coords[w[0]] == coords[w[1]]) {
            return Err(Error::shape("duplicate 2D coordinates"));
        }
        let mut f = Vec::with_capacity(feats.len());
        for &i in &order {
            f.extend_from_slice(&feats[i * channels..(i + 1) * channels]);
        }
        Ok(Self {
            dims,
            channels,
            coords: order.iter().map(|&i| coords[i]).collect(),
            feats: f,
        })
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

    pub fn index_map(&self) -> HashMap<[i32; 2], usize> {
        self.coords.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }
}

fn add3(a: VoxelCoord, b: [i32; 3]) -> VoxelCoord {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Per-output accumulation shared by every conv flavor. `neighbor(o, k)`
/// returns the input row feeding output `o` through offset `k`.
fn run_conv<F>(kernel: &ConvKernel, n_out: usize, input_feats: &[f64], neighbor: F) -> Vec<f64>
where
    F: Fn(usize, usize) -> Option<usize> + Sync,
{
    let c_in = kernel.c_in;
    let c_out = kernel.c_out;
    let mut out = vec![0.0; n_out * c_out];
    out.par_chunks_mut(c_out.max(1))
        .enumerate()
        .for_each(|(o, acc)| {
            acc.copy_from_slice(&kernel.bias);
            for k in 0..kernel.volume() {
                if let Some(j) = neighbor(o, k) {
                    kernel.accumulate(k, &input_feats[j * c_in..(j + 1) * c_in], acc);
                }
            }
        });
    out
}

/// Submanifold convolution: outputs exactly at the input sites.
pub fn subm_conv3d(t: &SparseTensor, k: &ConvKernel) -> Result<SparseTensor> {
    k.check(3, t.channels)?;
    if k.stride != 1 {
        return Err(Error::config("submanifold convolution requires stride 1"));
    }
    let index = t.index_map();
    let offsets = k.offsets();
    let feats = run_conv(k, t.len(), &t.feats, |o, kk| {
        index.get(&add3(t.coords[o], offsets[kk])).copied()
    });
    Ok(t.with_feats(k.c_out, feats))
}

/// Output sites of a strided convolution: every lattice point whose footprint
/// touches an active input, within `ceil(dims / stride)`.
pub fn strided_output_coords(t: &SparseTensor, k: &ConvKernel) -> Vec<VoxelCoord> {
    let s = k.stride as i32;
    let out_spec = t.spec.coarsened(k.stride);
    let offsets = k.offsets();
    let mut seen = std::collections::HashSet::new();
    for &q in &t.coords {
        for d in &offsets {
            let base = [q[0] - d[0], q[1] - d[1], q[2] - d[2]];
            if base.iter().any(|v| v.rem_euclid(s) != 0) {
                continue;
            }
            let o = [base[0] / s, base[1] / s, base[2] / s];
            if out_spec.contains(o) {
                seen.insert(o);
            }
        }
    }
    let mut out: Vec<_> = seen.into_iter().collect();
    out.sort_by_key(canonical_key);
    out
}

/// Regular (strided) sparse convolution; the output grid is `spec.coarsened(stride)`.
pub fn sparse_conv3d(t: &SparseTensor, k: &ConvKernel) -> Result<SparseTensor> {
    k.check(3, t.channels)?;
    let s = k.stride as i32;
    let index = t.index_map();
    let offsets = k.offsets();
    let coords = strided_output_coords(t, k);
    let feats = run_conv(k, coords.len(), &t.feats, |o, kk| {
        let c = coords[o];
        index.get(&add3([c[0] * s, c[1] * s, c[2] * s], offsets[kk])).copied()
    });
    Ok(SparseTensor {
        spec: t.spec.coarsened(k.stride),
        channels: k.c_out,
        coords,
        feats,
    })
}

/// Transposed sparse convolution from a coarse tensor back onto a recorded
/// fine coordinate set: `out[q] = b + sum over (o, d) with q = stride*o + d of W_d^T in[o]`.
pub fn inverse_conv3d(
    coarse: &SparseTensor,
    k: &ConvKernel,
    target_spec: VoxelGridSpec,
    target: &[VoxelCoord],
) -> Result<SparseTensor> {
    k.check(3, coarse.channels)?;
    let s = k.stride as i32;
    let index = coarse.index_map();
    let offsets = k.offsets();
    let feats = run_conv(k, target.len(), &coarse.feats, |o, kk| {
        let q = target[o];
        let d = offsets[kk];
        let base = [q[0] - d[0], q[1] - d[1], q[2] - d[2]];
        if base.iter().any(|v| v.rem_euclid(s) != 0) {
            return None;
        }
        index.get(&[base[0] / s, base[1] / s, base[2] / s]).copied()
    });
    SparseTensor::new(target_spec, k.c_out, target.to_vec(), feats)
}

/// Merges voxels by floor division of their indices, averaging features.
pub fn downsample(t: &SparseTensor, factor: usize) -> Result<SparseTensor> {
    if factor == 0 {
        return Err(Error::config("downsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(t.clone());
    }
    let f = factor as i32;
    let c = t.channels;
    let mut slot: HashMap<VoxelCoord, usize> = HashMap::new();
    let mut coords = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for (i, q) in t.coords.iter().enumerate() {
        let key = [q[0].div_euclid(f), q[1].div_euclid(f), q[2].div_euclid(f)];
        let s = *slot.entry(key).or_insert_with(|| {
            coords.push(key);
            sums.extend(std::iter::repeat_n(0.0, c));
            counts.push(0);
            coords.len() - 1
        });
        for (a, v) in sums[s * c..(s + 1) * c].iter_mut().zip(t.feat(i)) {
            *a += v;
        }
        counts[s] += 1;
    }
    for (s, &n) in counts.iter().enumerate() {
        for a in &mut sums[s * c..(s + 1) * c] {
            *a /= n as f64;
        }
    }
    SparseTensor::new(t.spec.coarsened(factor), c, coords, sums)
}

/// Submanifold 2D convolution over an image-plane map.
pub fn subm_conv2d(t: &SparseTensor2D, k: &ConvKernel) -> Result<SparseTensor2D> {
    k.check(2, t.channels)?;
    if k.stride != 1 {
        return Err(Error::config("submanifold convolution requires stride 1"));
    }
    let index = t.index_map();
    let offsets = k.offsets();
    let feats = run_conv(k, t.len(), &t.feats, |o, kk| {
        let c = t.coords[o];
        index.get(&[c[0] + offsets[kk][0], c[1] + offsets[kk][1]]).copied()
    });
    Ok(SparseTensor2D {
        dims: t.dims,
        channels: k.c_out,
        coords: t.coords.clone(),
        feats,
    })
}
