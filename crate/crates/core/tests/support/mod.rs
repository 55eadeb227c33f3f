//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use cmfiou::io::CalibBundle;
use cmfiou::nn::seeded_rng;
use cmfiou::projection::{build_projection, ProjectionModel};
use cmfiou::sparse::{ConvKernel, DofeParams, ImageGrid, ResVcBlock};
use cmfiou::voxel::{SparseTensor, VoxelGridSpec};
use rand::Rng;

/// Dense `[z][y][x][c]` volume with an occupancy mask.
#[derive(Clone)]
pub struct Dense {
    pub dims: [usize; 3],
    pub c: usize,
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Dense {
    pub fn zeros(dims: [usize; 3], c: usize) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self { dims, c, data: vec![0.0; n * c], mask: vec![false; n] }
    }

    pub fn cell(&self, p: [i64; 3]) -> Option<usize> {
        if (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < self.dims[k]) {
            Some((p[2] as usize * self.dims[1] + p[1] as usize) * self.dims[0] + p[0] as usize)
        } else {
            None
        }
    }

    pub fn from_sparse(t: &SparseTensor) -> Self {
        let mut d = Self::zeros(t.spec.dims, t.channels);
        for i in 0..t.len() {
            let q = t.coords[i];
            let idx = d.cell([q[0] as i64, q[1] as i64, q[2] as i64]).unwrap();
            d.mask[idx] = true;
            d.data[idx * d.c..(idx + 1) * d.c].copy_from_slice(t.feat(i));
        }
        d
    }

    pub fn get(&self, p: [i64; 3]) -> Option<&[f64]> {
        self.cell(p).map(|i| &self.data[i * self.c..(i + 1) * self.c])
    }

    pub fn active(&self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let p = [x as i64, y as i64, z as i64];
                    if self.mask[self.cell(p).unwrap()] {
                        out.push(p);
                    }
                }
            }
        }
        out
    }
}

fn weight(k: &ConvKernel, d: [i64; 3], ci: usize, co: usize) -> f64 {
    let r = (k.kernel_size as i64 - 1) / 2;
    let ks = k.kernel_size as i64;
    let idx = if k.ndim == 3 {
        ((d[2] + r) * ks + (d[1] + r)) * ks + (d[0] + r)
    } else {
        (d[1] + r) * ks + (d[0] + r)
    };
    k.weights[(idx as usize * k.c_in + ci) * k.c_out + co]
}

/// Dense strided correlation with zero padding, evaluated at every lattice site.
pub fn dense_conv3d(input: &Dense, k: &ConvKernel) -> Dense {
    let s = k.stride;
    let od = [input.dims[0].div_ceil(s), input.dims[1].div_ceil(s), input.dims[2].div_ceil(s)];
    let r = (k.kernel_size as i64 - 1) / 2;
    let mut out = Dense::zeros(od, k.c_out);
    for z in 0..od[2] as i64 {
        for y in 0..od[1] as i64 {
            for x in 0..od[0] as i64 {
                let o = out.cell([x, y, z]).unwrap();
                let mut acc = k.bias.clone();
                let mut touched = false;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let q = [x * s as i64 + dx, y * s as i64 + dy, z * s as i64 + dz];
                            let Some(qi) = input.cell(q) else { continue };
                            if !input.mask[qi] {
                                continue;
                            }
                            touched = true;
                            for ci in 0..k.c_in {
                                let v = input.data[qi * input.c + ci];
                                for co in 0..k.c_out {
                                    acc[co] += weight(k, [dx, dy, dz], ci, co) * v;
                                }
                            }
                        }
                    }
                }
                out.mask[o] = touched;
                out.data[o * k.c_out..(o + 1) * k.c_out].copy_from_slice(&acc);
            }
        }
    }
    out
}

/// Dense transposed convolution: scatters every active coarse site through the kernel.
pub fn dense_transposed3d(coarse: &Dense, k: &ConvKernel, fine_dims: [usize; 3]) -> Dense {
    let s = k.stride as i64;
    let r = (k.kernel_size as i64 - 1) / 2;
    let mut out = Dense::zeros(fine_dims, k.c_out);
    for i in 0..out.mask.len() {
        out.data[i * k.c_out..(i + 1) * k.c_out].copy_from_slice(&k.bias);
    }
    for o in coarse.active() {
        let v = coarse.get(o).unwrap().to_vec();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let q = [o[0] * s + dx, o[1] * s + dy, o[2] * s + dz];
                    let Some(qi) = out.cell(q) else { continue };
                    for ci in 0..k.c_in {
                        for co in 0..k.c_out {
                            out.data[qi * k.c_out + co] += weight(k, [dx, dy, dz], ci, co) * v[ci];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dense 2D correlation over a `[v][u][c]` map, masked to active cells.
pub fn dense_conv2d(map: &BTreeMap<(i64, i64), Vec<f64>>, k: &ConvKernel) -> BTreeMap<(i64, i64), Vec<f64>> {
    let r = (k.kernel_size as i64 - 1) / 2;
    let mut out = BTreeMap::new();
    for &(u, v) in map.keys() {
        let mut acc = k.bias.clone();
        for dv in -r..=r {
            for du in -r..=r {
                if let Some(f) = map.get(&(u + du, v + dv)) {
                    for ci in 0..k.c_in {
                        for co in 0..k.c_out {
                            acc[co] += weight(k, [du, dv, 0], ci, co) * f[ci];
                        }
                    }
                }
            }
        }
        out.insert((u, v), acc);
    }
    out
}

pub fn assert_close(a: &[f64], b: &[f64], rel: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let tol = rel * x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

/// Random tensor with `n` distinct active voxels on an `dims` grid.
pub fn random_tensor(seed: u64, dims: [usize; 3], n: usize, c: usize) -> SparseTensor {
    let mut rng = seeded_rng(seed);
    let spec = VoxelGridSpec::new([0.0; 3], [1.0; 3], dims).unwrap();
    let mut set = BTreeSet::new();
    while set.len() < n {
        set.insert([
            rng.random_range(0..dims[0] as i32),
            rng.random_range(0..dims[1] as i32),
            rng.random_range(0..dims[2] as i32),
        ]);
    }
    let coords: Vec<_> = set.into_iter().collect();
    let feats = (0..coords.len() * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    SparseTensor::new(spec, c, coords, feats).unwrap()
}

/// Features of `t` read back from a dense volume at `t`'s coordinates.
pub fn gather(dense: &Dense, coords: &[[i32; 3]]) -> Vec<f64> {
    let mut out = Vec::new();
    for q in coords {
        out.extend_from_slice(dense.get([q[0] as i64, q[1] as i64, q[2] as i64]).unwrap());
    }
    out
}

pub fn layer_norm_ref(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
}

pub fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Farthest-point order recomputing every distance to the chosen set each step.
pub fn fps_oracle(points: &[[f64; 3]], s: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    while chosen.len() < s.min(points.len()) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = chosen.iter().map(|&c| dist2(*p, points[c])).fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

pub fn linear_oracle(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let out = b.len();
    (0..out)
        .map(|o| b[o] + (0..x.len()).map(|i| x[i] * w[i * out + o]).sum::<f64>())
        .collect()
}

pub fn stack_oracle(s: &cmfiou::nn::LinearStack, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, l) in s.layers.iter().enumerate() {
        if i > 0 {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = linear_oracle(&l.weight, &l.bias, &h);
    }
    h
}

pub fn pe_oracle(slot: usize, width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for i in 0..width.div_ceil(2) {
        let freq = 1.0 / 10000f64.powf((2 * i) as f64 / width as f64);
        out[2 * i] = (slot as f64 * freq).sin();
        if 2 * i + 1 < width {
            out[2 * i + 1] = (slot as f64 * freq).cos();
        }
    }
    out
}

/// Three-loop single-head attention of one query over `keys`.
pub fn attention_oracle(
    w: &cmfiou::refine::AttentionWeights,
    query: &[f64],
    query_slot: usize,
    entries: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>) {
    let with_pe = |x: &[f64], slot| x.iter().zip(pe_oracle(slot, x.len())).map(|(a, b)| a + b).collect::<Vec<_>>();
    let q = linear_oracle(&w.q.weight, &w.q.bias, &with_pe(query, query_slot));
    let d = q.len() as f64;
    let mut logits = Vec::new();
    let mut values = Vec::new();
    for (j, e) in entries.iter().enumerate() {
        let s = with_pe(e, j);
        let k = linear_oracle(&w.k.weight, &w.k.bias, &s);
        let mut dot = 0.0;
        for c in 0..q.len() {
            dot += q[c] * k[c];
        }
        logits.push(dot / d.sqrt());
        values.push(linear_oracle(&w.v.weight, &w.v.bias, &s));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let a: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
    let mut out = vec![0.0; values[0].len()];
    for (j, v) in values.iter().enumerate() {
        for c in 0..out.len() {
            out[c] += a[j] * v[c];
        }
    }
    (out, a)
}

/// Grid pooling by scanning every voxel for every grid point.
pub fn grid_pool_oracle(
    t: &SparseTensor,
    b: &cmfiou::Box3D,
    m: usize,
    radius: f64,
    mlp: &cmfiou::nn::LinearStack,
) -> Vec<f64> {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let mut concat = Vec::new();
    for iz in 0..m {
        for iy in 0..m {
            for ix in 0..m {
                let f = |i: usize, len: f64| ((i as f64 + 0.5) / m as f64 - 0.5) * len;
                let (lx, ly, lz) = (f(ix, b.l), f(iy, b.w), f(iz, b.h));
                let g = [b.cx + c * lx - s * ly, b.cy + s * lx + c * ly, b.cz + lz];
                let mut best: Option<Vec<f64>> = None;
                for i in 0..t.len() {
                    let q = t.coords[i];
                    let center = [
                        t.spec.origin[0] + (q[0] as f64 + 0.5) * t.spec.voxel_size[0],
                        t.spec.origin[1] + (q[1] as f64 + 0.5) * t.spec.voxel_size[1],
                        t.spec.origin[2] + (q[2] as f64 + 0.5) * t.spec.voxel_size[2],
                    ];
                    if dist2(center, g) <= radius * radius {
                        let feat = t.feat(i);
                        best = Some(match best {
                            None => feat.to_vec(),
                            Some(cur) => cur.iter().zip(feat).map(|(a, b)| a.max(*b)).collect(),
                        });
                    }
                }
                concat.extend(best.unwrap_or_else(|| vec![0.0; t.channels]));
            }
        }
    }
    stack_oracle(mlp, &concat)
}

pub fn subm_dense(input: &Dense, k: &ConvKernel) -> Dense {
    let mut out = dense_conv3d(input, k);
    out.mask = input.mask.clone();
    out
}

pub fn camera() -> ProjectionModel {
    let mut c = CalibBundle::identity();
    c.p2 = [[8.0, 0.0, 2.0, 0.0], [0.0, 8.0, 3.0, 0.0], [0.0, 0.0, 1.0, 0.0]];
    build_projection(&c).unwrap()
}


/// Project, rasterize, convolve and gather, written out step by step.
pub fn resnr_oracle(t: &SparseTensor, model: &ProjectionModel, k: &ConvKernel, grid: &ImageGrid) -> Vec<f64> {
    let c = t.channels;
    let mut cell_of = Vec::new();
    let mut sums: BTreeMap<(i64, i64), (Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..t.len() {
        let p = t.spec.center_of(t.coords[i]);
        let f = model.forward();
        let h: Vec<f64> = (0..3).map(|r| f[r][0] * p[0] + f[r][1] * p[1] + f[r][2] * p[2] + f[r][3]).collect();
        let (u, v) = (h[0] / h[2], h[1] / h[2]);
        let inside = h[2] > 0.0 && u >= 0.0 && v >= 0.0 && u < grid.width as f64 && v < grid.height as f64;
        if !inside {
            cell_of.push(None);
            continue;
        }
        let cell = ((u / grid.cell_px).floor() as i64, (v / grid.cell_px).floor() as i64);
        let e = sums.entry(cell).or_insert((vec![0.0; c], 0));
        for ch in 0..c {
            e.0[ch] += t.feat(i)[ch];
        }
        e.1 += 1;
        cell_of.push(Some(cell));
    }
    let map: BTreeMap<(i64, i64), Vec<f64>> =
        sums.into_iter().map(|(k, (s, n))| (k, s.iter().map(|v| v / n as f64).collect())).collect();
    let conv = dense_conv2d(&map, k);
    let mut out = t.feats.clone();
    for (i, cell) in cell_of.iter().enumerate() {
        if let Some(cell) = cell {
            for ch in 0..c {
                out[i * c + ch] += conv[cell][ch];
            }
        }
    }
    out
}


pub fn resvc_params(seed: u64, c: usize) -> ResVcBlock {
    let mut rng = seeded_rng(seed);
    ResVcBlock {
        subm: ConvKernel::seeded(3, 3, 1, c, c, &mut rng),
        sp3d: ConvKernel::seeded(3, 3, 1, c, c, &mut rng),
        factor: 2,
        conv2d: ConvKernel::seeded(2, 3, 1, c, c, &mut rng),
    }
}


pub fn dofe_params(seed: u64, depth: usize, c: usize) -> DofeParams {
    let mut rng = seeded_rng(seed);
    DofeParams {
        encoder: (0..depth)
            .map(|_| (ConvKernel::seeded(3, 3, 2, c, c, &mut rng), ConvKernel::seeded(3, 3, 1, c, c, &mut rng)))
            .collect(),
        decoder: (0..depth).map(|_| ConvKernel::seeded(3, 3, 2, c, c, &mut rng)).collect(),
    }
}


pub fn dofe_oracle(t: &SparseTensor, p: &DofeParams) -> Vec<f64> {
    let mut levels = vec![Dense::from_sparse(t)];
    for (down, subm) in &p.encoder {
        let coarse = dense_conv3d(levels.last().unwrap(), down);
        levels.push(subm_dense(&coarse, subm));
    }
    let mut y = levels.pop().unwrap();
    for (skip, k) in levels.iter().zip(&p.decoder).rev() {
        let mut up = dense_transposed3d(&y, k, skip.dims);
        for cell in 0..skip.mask.len() {
            let c = skip.c;
            if skip.mask[cell] {
                let sum: Vec<f64> = (0..c).map(|ch| up.data[cell * c + ch] + skip.data[cell * c + ch]).collect();
                up.data[cell * c..(cell + 1) * c].copy_from_slice(&layer_norm_ref(&sum));
            }
        }
        up.mask = skip.mask.clone();
        y = up;
    }
    gather(&y, &t.coords)
}

/// Submanifold branch plus the coarse branch (mean-pool by `factor`, dense
/// conv, read back at each voxel's parent cell), evaluated densely.
pub fn rsm_oracle(t: &SparseTensor, ks: &ConvKernel, kp: &ConvKernel, factor: usize) -> Vec<f64> {
    let c = t.channels;
    let fine = subm_dense(&Dense::from_sparse(t), ks);
    let f = factor as i64;
    let dims = t.spec.dims.map(|d| d.div_ceil(factor));
    let mut pooled = Dense::zeros(dims, c);
    let mut counts = vec![0usize; dims.iter().product()];
    for i in 0..t.len() {
        let q = t.coords[i];
        let ci = pooled.cell([q[0] as i64 / f, q[1] as i64 / f, q[2] as i64 / f]).unwrap();
        pooled.mask[ci] = true;
        counts[ci] += 1;
        for ch in 0..c {
            pooled.data[ci * c + ch] += t.feat(i)[ch];
        }
    }
    for (ci, &n) in counts.iter().enumerate() {
        if n > 0 {
            for ch in 0..c {
                pooled.data[ci * c + ch] /= n as f64;
            }
        }
    }
    let coarse = dense_conv3d(&pooled, kp);
    let co = ks.c_out;
    let mut want = Vec::new();
    for q in &t.coords {
        let a = fine.get([q[0] as i64, q[1] as i64, q[2] as i64]).unwrap();
        let p = [q[0] as i64 / f, q[1] as i64 / f, q[2] as i64 / f];
        let b = coarse.get(p).unwrap();
        let active = coarse.mask[coarse.cell(p).unwrap()];
        for ch in 0..co {
            want.push(a[ch] + if active { b[ch] } else { 0.0 });
        }
    }
    want
}

/// Footprint corners computed from scratch, counter-clockwise.
pub fn rect_corners(b: &cmfiou::Box3D) -> [[f64; 2]; 4] {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[x, y]| [b.cx + c * x - s * y, b.cy + s * x + c * y])
}

fn in_rect(p: [f64; 2], b: &cmfiou::Box3D) -> bool {
    let (c, s) = (b.yaw.cos(), b.yaw.sin());
    let (dx, dy) = (p[0] - b.cx, p[1] - b.cy);
    let (x, y) = (c * dx + s * dy, -s * dx + c * dy);
    x.abs() <= b.l / 2.0 + 1e-12 && y.abs() <= b.w / 2.0 + 1e-12
}

/// Footprint overlap as the hull of contained corners and edge crossings.
pub fn bev_overlap_oracle(a: &cmfiou::Box3D, b: &cmfiou::Box3D) -> f64 {
    let (ca, cb) = (rect_corners(a), rect_corners(b));
    let mut pts: Vec<[f64; 2]> = Vec::new();
    pts.extend(ca.iter().filter(|p| in_rect(**p, b)));
    pts.extend(cb.iter().filter(|p| in_rect(**p, a)));
    for i in 0..4 {
        let (p, r) = (ca[i], [ca[(i + 1) % 4][0] - ca[i][0], ca[(i + 1) % 4][1] - ca[i][1]]);
        for j in 0..4 {
            let (q, s) = (cb[j], [cb[(j + 1) % 4][0] - cb[j][0], cb[(j + 1) % 4][1] - cb[j][1]]);
            let den = r[0] * s[1] - r[1] * s[0];
            if den.abs() < 1e-15 {
                continue;
            }
            let qp = [q[0] - p[0], q[1] - p[1]];
            let t = (qp[0] * s[1] - qp[1] * s[0]) / den;
            let u = (qp[0] * r[1] - qp[1] * r[0]) / den;
            if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
                pts.push([p[0] + t * r[0], p[1] + t * r[1]]);
            }
        }
    }
    if pts.len() < 3 {
        return 0.0;
    }
    let n = pts.len() as f64;
    let m = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
    pts.sort_by(|p, q| (p[1] - m[1]).atan2(p[0] - m[0]).total_cmp(&(q[1] - m[1]).atan2(q[0] - m[0])));
    let mut area = 0.0;
    for i in 0..pts.len() {
        let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
        area += p[0] * q[1] - q[0] * p[1];
    }
    area.abs() / 2.0
}

pub fn z_overlap(a: &cmfiou::Box3D, b: &cmfiou::Box3D) -> f64 {
    let lo = (a.cz - a.h / 2.0).max(b.cz - b.h / 2.0);
    let hi = (a.cz + a.h / 2.0).min(b.cz + b.h / 2.0);
    (hi - lo).max(0.0)
}

pub fn iou_3d_oracle(a: &cmfiou::Box3D, b: &cmfiou::Box3D) -> f64 {
    let inter = bev_overlap_oracle(a, b) * z_overlap(a, b);
    let union = a.l * a.w * a.h + b.l * b.w * b.h - inter;
    if inter <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Stratified Monte-Carlo estimate of the fraction of `a` that lies in `b`.
///
/// `a` is cut into `n[0] x n[1] x n[2]` cells in its own frame and each cell
/// gets one sample. Sample `i` of row `(j, k)` sits in cell
/// `(i, (j + i) mod n[1], (k + i) mod n[2])`, so a row crosses every width
/// and height stratum once; each row draws its own offsets inside the
/// cells. With `n[2] == 0` only the footprints are compared.
pub fn mc_fraction(a: &cmfiou::Box3D, b: &cmfiou::Box3D, n: [usize; 3], rng: &mut impl Rng) -> f64 {
    let (ca, sa) = (a.yaw.cos(), a.yaw.sin());
    let (cb, sb) = (b.yaw.cos(), b.yaw.sin());
    let (hl, hw) = (b.l / 2.0, b.w / 2.0);
    let (zlo, zhi) = (b.cz - b.h / 2.0, b.cz + b.h / 2.0);
    // b-local x and y as affine functions of a-local x and y.
    let (dx, dy) = (a.cx - b.cx, a.cy - b.cy);
    let (k0, kx, ky) = (cb * dx + sb * dy, cb * ca + sb * sa, -cb * sa + sb * ca);
    let (l0, lx_, ly_) = (-sb * dx + cb * dy, -sb * ca + cb * sa, sb * sa + cb * ca);
    let lx_base: Vec<f64> = (0..n[0]).map(|i| (i as f64 / n[0] as f64 - 0.5) * a.l).collect();
    let ly_base: Vec<f64> = (0..n[1]).map(|j| (j as f64 / n[1] as f64 - 0.5) * a.w).collect();
    let z_base: Vec<f64> = (0..n[2]).map(|k| a.cz + (k as f64 / n[2] as f64 - 0.5) * a.h).collect();
    let layers = n[2].max(1);
    let mut hits = 0usize;
    for k in 0..layers {
        for j in 0..n[1] {
            let (rx, ry, rz): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            let (ox, oy, oz) = (rx * a.l / n[0] as f64, ry * a.w / n[1] as f64, rz * a.h / n[2].max(1) as f64);
            let (mut yi, mut zi) = (j, k);
            for &lx0 in &lx_base {
                let inside_z = n[2] == 0 || {
                    let z = z_base[zi] + oz;
                    z >= zlo && z <= zhi
                };
                let (lx, ly) = (lx0 + ox, ly_base[yi] + oy);
                let bx = k0 + kx * lx + ky * ly;
                let by = l0 + lx_ * lx + ly_ * ly;
                hits += (inside_z && bx.abs() <= hl && by.abs() <= hw) as usize;
                yi += 1;
                if yi == n[1] {
                    yi = 0;
                }
                if n[2] > 0 {
                    zi += 1;
                    if zi == n[2] {
                        zi = 0;
                    }
                }
            }
        }
    }
    hits as f64 / (n[0] * n[1] * layers) as f64
}

/// IoU from an overlap fraction `p` of `a`, and the standard deviation of
/// that estimate under binomial sampling of `samples` points at the true
/// fraction implied by `iou_true`.
pub fn mc_iou_and_sigma(vol_a: f64, vol_b: f64, p: f64, iou_true: f64, samples: f64) -> (f64, f64) {
    let inter = p * vol_a;
    let iou = if inter > 0.0 { inter / (vol_a + vol_b - inter) } else { 0.0 };
    let inter_true = iou_true * (vol_a + vol_b) / (1.0 + iou_true);
    let p_true = (inter_true / vol_a).clamp(0.0, 1.0);
    let sigma_p = (p_true * (1.0 - p_true) / samples).sqrt();
    let d = vol_a * (vol_a + vol_b) / (vol_a + vol_b - inter_true).powi(2);
    (iou, d * sigma_p)
}

/// A box and a second one placed near it, so most pairs overlap.
pub fn random_pair(rng: &mut impl Rng) -> (cmfiou::Box3D, cmfiou::Box3D) {
    let mut size = || [rng.random_range(0.5..5.0), rng.random_range(0.5..3.0), rng.random_range(0.5..2.5)];
    let (sa, sb) = (size(), size());
    let a = cmfiou::Box3D::new(
        [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-2.0..1.0)],
        sa,
        rng.random_range(-3.2..3.2),
    );
    let b = cmfiou::Box3D::new(
        [a.cx + rng.random_range(-3.0..3.0), a.cy + rng.random_range(-3.0..3.0), a.cz + rng.random_range(-1.5..1.5)],
        sb,
        rng.random_range(-3.2..3.2),
    );
    (a, b)
}

pub fn iou_bev_oracle(a: &cmfiou::Box3D, b: &cmfiou::Box3D) -> f64 {
    let inter = bev_overlap_oracle(a, b);
    if inter <= 0.0 {
        0.0
    } else {
        inter / (a.l * a.w + b.l * b.w - inter)
    }
}

/// Greedy NMS from a full pairwise overlap table and explicit ranks.
pub fn nms_reference(boxes: &[cmfiou::Box3D], classes: &[usize], conf: &[f64], thresh: f64, bev: bool) -> Vec<usize> {
    let n = boxes.len();
    let overlap: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if bev { iou_bev_oracle(&boxes[i], &boxes[j]) } else { iou_3d_oracle(&boxes[i], &boxes[j]) })
                .collect()
        })
        .collect();
    let rank: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| conf[j] > conf[i] || (conf[j] == conf[i] && j < i)).count())
        .collect();
    let mut by_rank = vec![0; n];
    for i in 0..n {
        by_rank[rank[i]] = i;
    }
    let mut kept: Vec<usize> = Vec::new();
    for &i in &by_rank {
        if kept.iter().all(|&k| classes[k] != classes[i] || overlap[k][i] <= thresh) {
            kept.push(i);
        }
    }
    kept
}

/// `sum_t [L_c + 0.5 (L_v + L_p)]`, each head `SL1(iou) + SL1(residuals) + BCE(cls)`,
/// with every mean written as an explicit loop.
pub fn loss_oracle(preds: &[[cmfiou::loss::HeadPredictions; 3]], targets: &[cmfiou::loss::HeadTargets]) -> f64 {
    let sl1 = |d: f64| if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
    let mut total = 0.0;
    for (heads, t) in preds.iter().zip(targets) {
        let mut per_head = [0.0; 3];
        for (h, p) in heads.iter().enumerate() {
            let n = t.iou.len();
            let mut l_iou = 0.0;
            for i in 0..n {
                l_iou += sl1(p.iou[i] - t.iou[i]);
            }
            let mut l_reg = 0.0;
            for i in 0..n {
                for k in 0..7 {
                    l_reg += sl1(p.residuals[i][k] - t.residuals[i][k]);
                }
            }
            let (mut l_cls, mut m) = (0.0, 0usize);
            for i in 0..n {
                if let Some(y) = t.cls[i] {
                    let q = p.cls[i];
                    let pos = if y > 0.0 { -y * q.max(1e-7).ln() } else { 0.0 };
                    let neg = if y < 1.0 { -(1.0 - y) * (1.0 - q).max(1e-7).ln() } else { 0.0 };
                    l_cls += pos + neg;
                    m += 1;
                }
            }
            per_head[h] = l_iou / n as f64 + l_reg / (7 * n) as f64 + if m > 0 { l_cls / m as f64 } else { 0.0 };
        }
        total += per_head[0] + 0.5 * per_head[1] + 0.5 * per_head[2];
    }
    total
}

/// Random predictions and targets for `t` iterations over `n` proposals.
pub fn loss_fixture(seed: u64, t: usize, n: usize) -> (Vec<[cmfiou::loss::HeadPredictions; 3]>, Vec<cmfiou::loss::HeadTargets>) {
    use cmfiou::loss::{HeadPredictions, HeadTargets};
    let mut rng = seeded_rng(seed);
    let head = |rng: &mut rand_chacha::ChaCha8Rng| HeadPredictions {
        iou: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
        residuals: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.5..2.5))).collect(),
        cls: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    };
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..t {
        preds.push([head(&mut rng), head(&mut rng), head(&mut rng)]);
        targets.push(HeadTargets {
            iou: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            residuals: (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.5..2.5))).collect(),
            cls: (0..n)
                .map(|_| match rng.random_range(0..3) {
                    0 => None,
                    1 => Some(0.0),
                    _ => Some(1.0),
                })
                .collect(),
        });
    }
    (preds, targets)
}

/// A label with the fields evaluation looks at.
pub fn label(class: &str, location: [f64; 3], dims_hwl: [f64; 3], ry: f64, box_height: f64, occlusion: i32, truncation: f64, score: Option<f64>) -> cmfiou::io::LabelRecord {
    cmfiou::io::LabelRecord {
        class: cmfiou::io::ObjectClass::parse(class),
        truncation,
        occlusion,
        alpha: 0.0,
        bbox2d: [100.0, 100.0, 200.0, 100.0 + box_height],
        dimensions: dims_hwl,
        location,
        rotation_y: ry,
        score,
    }
}

/// Class-typical ground-truth boxes scattered in front of the sensor.
pub fn random_gts(seed: u64, n: usize) -> Vec<cmfiou::proposals::LabeledBox> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let class_id = rng.random_range(0..3);
            let base = [[3.9, 1.6, 1.5], [0.8, 0.6, 1.7], [1.8, 0.6, 1.7]][class_id];
            let size = base.map(|s: f64| s * rng.random_range(0.85..1.15));
            cmfiou::proposals::LabeledBox {
                bbox: cmfiou::Box3D::new(
                    [rng.random_range(5.0..60.0), rng.random_range(-20.0..20.0), rng.random_range(-1.2..-0.5)],
                    size,
                    rng.random_range(-3.1..3.1),
                ),
                class_id,
            }
        })
        .collect()
}

/// Per ground truth and interval: how many candidates, and how many whose
/// recomputed overlap falls outside the interval.
pub fn generation_audit(
    gts: &[cmfiou::proposals::LabeledBox],
    cands: &[cmfiou::proposals::Candidate],
    intervals: &[(f64, f64)],
) -> (Vec<Vec<usize>>, usize) {
    let mut counts = vec![vec![0usize; intervals.len()]; gts.len()];
    let mut violations = 0;
    for c in cands {
        let cmfiou::proposals::Source::Generated { gt_index, interval } = c.source else {
            violations += 1;
            continue;
        };
        counts[gt_index][interval] += 1;
        let iou = iou_3d_oracle(&c.bbox, &gts[gt_index].bbox);
        let (lo, hi) = intervals[interval];
        if !(iou >= lo && iou < hi) || c.class_id != gts[gt_index].class_id {
            violations += 1;
        }
    }
    (counts, violations)
}
