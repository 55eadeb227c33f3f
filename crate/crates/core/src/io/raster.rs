use super::take_u32;
use crate::error::{Error, Result};

const DEPTH_MAGIC: &[u8; 4] = b"CMFD";
const RGB_MAGIC: &[u8; 4] = b"CMFI";
const HEADER_BYTES: usize = 16;

/// Per-pixel storage of a depth container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthEncoding {
    /// `u16` little-endian, depth in meters = raw / 256.
    U16Scaled,
    /// `f32` little-endian meters.
    F32,
}

impl DepthEncoding {
    fn tag(self) -> u8 {
        match self {
            DepthEncoding::U16Scaled => 1,
            DepthEncoding::F32 => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DepthEncoding::U16Scaled),
            2 => Ok(DepthEncoding::F32),
            t => Err(Error::MalformedFile(format!("unknown depth encoding tag {t}"))),
        }
    }

    fn bytes_per_pixel(self) -> usize {
        match self {
            DepthEncoding::U16Scaled => 2,
            DepthEncoding::F32 => 4,
        }
    }
}

/// Dense depth image in meters, row-major; 0 marks a missing pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f32>,
}

impl DepthMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.depth[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, d: f32) {
        self.depth[row * self.width + col] = d;
    }
}

/// 8-bit RGB image, row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, col: usize, row: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn header(bytes: &[u8], magic: &[u8; 4], what: &str) -> Result<(usize, usize, u8)> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::MalformedFile(format!("{what}: truncated header")));
    }
    if &bytes[0..4] != magic {
        return Err(Error::MalformedFile(format!("{what}: bad magic")));
    }
    let w = take_u32(bytes, 4) as usize;
    let h = take_u32(bytes, 8) as usize;
    Ok((w, h, bytes[12]))
}

fn write_header(out: &mut Vec<u8>, magic: &[u8; 4], w: usize, h: usize, tag: u8) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&[tag, 0, 0, 0]);
}

pub fn read_depth_map(bytes: &[u8]) -> Result<DepthMap> {
    let (width, height, tag) = header(bytes, DEPTH_MAGIC, "depth map")?;
    let enc = DepthEncoding::from_tag(tag)?;
    let bpp = enc.bytes_per_pixel();
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(bpp))
        .ok_or_else(|| Error::MalformedFile("depth map dimensions overflow".into()))?;
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != expected {
        return Err(Error::MalformedFile(format!(
            "depth map payload holds {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let depth: Vec<f32> = match enc {
        DepthEncoding::U16Scaled => payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32 / 256.0)
            .collect(),
        DepthEncoding::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if let Some(i) = depth.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::MalformedFile(format!("depth pixel {i} is negative or not finite")));
    }
    Ok(DepthMap { width, height, depth })
}

/// Encodes a depth map; with [`DepthEncoding::U16Scaled`] every depth must be
/// an exact multiple of 1/256 m below 256 m.
pub fn write_depth_map(map: &DepthMap, enc: DepthEncoding) -> Result<Vec<u8>> {
    if map.depth.len() != map.width * map.height {
        return Err(Error::shape("depth buffer does not match width x height"));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + map.depth.len() * enc.bytes_per_pixel());
    write_header(&mut out, DEPTH_MAGIC, map.width, map.height, enc.tag());
    for &d in &map.depth {
        match enc {
            DepthEncoding::U16Scaled => {
                let raw = d * 256.0;
                if !(0.0..=65535.0).contains(&raw) || raw.fract() != 0.0 {
                    return Err(Error::Domain(format!("depth {d} m is not representable as u16/256")));
                }
                out.extend_from_slice(&(raw as u16).to_le_bytes());
            }
            DepthEncoding::F32 => out.extend_from_slice(&d.to_le_bytes()),
        }
    }
    Ok(out)
}

pub fn read_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, channels) = header(bytes, RGB_MAGIC, "rgb image")?;
    if channels != 3 {
        return Err(Error::MalformedFile(format!("rgb image declares {channels} channels")));
    }
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != width * height * 3 {
        return Err(Error::MalformedFile(format!(
            "rgb payload holds {} bytes, header implies {}",
            payload.len(),
            width * height * 3
        )));
    }
    Ok(RgbImage {
        width,
        height,
        data: payload.to_vec(),
    })
}

pub fn write_rgb(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + img.data.len());
    write_header(&mut out, RGB_MAGIC, img.width, img.height, 3);
    out.extend_from_slice(&img.data);
    out
}
