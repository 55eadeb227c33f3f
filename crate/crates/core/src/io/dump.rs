//! Binary dumps of point clouds and sparse voxel tensors.

use super::take_u32;
use crate::error::{Error, Result};
use crate::projection::PointRecord;
use crate::voxel::{SparseTensor, VoxelGridSpec};

const POINTS_MAGIC: &[u8; 4] = b"CMFP";
const VOXELS_MAGIC: &[u8; 4] = b"CMFV";
const VERSION: u32 = 1;

fn f64_at(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn check_magic(bytes: &[u8], magic: &[u8; 4], min: usize, what: &str) -> Result<()> {
    if bytes.len() < min {
        return Err(Error::MalformedFile(format!("{what}: truncated header")));
    }
    if &bytes[0..4] != magic {
        return Err(Error::MalformedFile(format!("{what}: bad magic")));
    }
    let v = take_u32(bytes, 4);
    if v != VERSION {
        return Err(Error::MalformedFile(format!("{what}: unsupported version {v}")));
    }
    Ok(())
}

/// `CMFP`, version, count, then `count x 9` little-endian f64 channels.
pub fn write_points(points: &[PointRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + points.len() * 72);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p.channels() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_points(bytes: &[u8]) -> Result<Vec<PointRecord>> {
    check_magic(bytes, POINTS_MAGIC, 16, "point dump")?;
    let n = u64_at(bytes, 8) as usize;
    let body = &bytes[16..];
    if Some(body.len()) != n.checked_mul(72) {
        return Err(Error::MalformedFile(format!(
            "point dump declares {n} points but carries {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(72)
        .map(|rec| {
            let c: Vec<f64> = (0..9).map(|k| f64_at(rec, 8 * k)).collect();
            PointRecord::from_channels(&c)
        })
        .collect())
}

/// `CMFV`, version, grid spec, channels, count, then per voxel three i32
/// indices followed by `channels` f64 features.
pub fn write_sparse_tensor(t: &SparseTensor) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VOXELS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in t.spec.origin.iter().chain(t.spec.voxel_size.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in t.spec.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(t.channels as u32).to_le_bytes());
    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
    for i in 0..t.len() {
        for c in t.coords[i] {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in t.feat(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_sparse_tensor(bytes: &[u8]) -> Result<SparseTensor> {
    const HEADER: usize = 80;
    check_magic(bytes, VOXELS_MAGIC, HEADER, "voxel dump")?;
    let origin = [f64_at(bytes, 8), f64_at(bytes, 16), f64_at(bytes, 24)];
    let size = [f64_at(bytes, 32), f64_at(bytes, 40), f64_at(bytes, 48)];
    let dims = [
        take_u32(bytes, 56) as usize,
        take_u32(bytes, 60) as usize,
        take_u32(bytes, 64) as usize,
    ];
    let channels = take_u32(bytes, 68) as usize;
    let n = u64_at(bytes, 72) as usize;
    let rec = 12 + 8 * channels;
    let body = &bytes[HEADER..];
    if Some(body.len()) != n.checked_mul(rec) {
        return Err(Error::MalformedFile(format!(
            "voxel dump declares {n} voxels but carries {} bytes",
            body.len()
        )));
    }
    let spec = VoxelGridSpec::new(origin, size, dims)
        .map_err(|e| Error::MalformedFile(format!("voxel dump grid: {e}")))?;
    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * channels);
    for r in body.chunks_exact(rec) {
        coords.push([
            i32::from_le_bytes(r[0..4].try_into().unwrap()),
            i32::from_le_bytes(r[4..8].try_into().unwrap()),
            i32::from_le_bytes(r[8..12].try_into().unwrap()),
        ]);
        feats.extend((0..channels).map(|k| f64_at(r, 12 + 8 * k)));
    }
    SparseTensor::new(spec, channels, coords, feats)
        .map_err(|e| Error::MalformedFile(format!("voxel dump: {e}")))
}
