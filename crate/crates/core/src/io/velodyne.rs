use crate::error::{Error, Result};

const RECORD_BYTES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

/// One LiDAR sweep in sensor coordinates, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawScan {
    pub points: Vec<LidarPoint>,
}

impl RawScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Decodes little-endian `(x, y, z, intensity)` f32 quadruples.
pub fn read_velodyne(bytes: &[u8]) -> Result<RawScan> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::MalformedFile(format!(
            "velodyne payload of {} bytes is not a multiple of {RECORD_BYTES}",
            bytes.len()
        )));
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let p = LidarPoint {
            x: f(0),
            y: f(1),
            z: f(2),
            intensity: f(3),
        };
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(Error::MalformedFile(format!("velodyne point {i} is not finite")));
        }
        points.push(p);
    }
    Ok(RawScan { points })
}

pub fn write_velodyne(scan: &RawScan) -> Vec<u8> {
    let mut out = Vec::with_capacity(scan.len() * RECORD_BYTES);
    for p in &scan.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}
