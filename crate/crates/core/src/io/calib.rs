use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// The three KITTI matrices needed to map LiDAR points into the left color camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibBundle {
    /// 3x4 projection of rectified camera coordinates into image 2 (pixels).
    pub p2: [[f64; 4]; 3],
    /// 3x3 rectifying rotation.
    pub r0_rect: [[f64; 3]; 3],
    /// 3x4 rigid transform from LiDAR to (unrectified) camera coordinates.
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

impl CalibBundle {
    /// Unit focal length, zero principal point, camera axes equal to the LiDAR axes.
    pub fn identity() -> Self {
        Self {
            p2: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
            r0_rect: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            tr_velo_to_cam: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]],
        }
    }
}

fn parse_line(line: &str) -> Option<(&str, &str)> {
    let line = line.trim();
    if line.is_empty() {
        return None;
    }
    match line.split_once(':') {
        Some((k, rest)) => Some((k.trim(), rest)),
        None => {
            let (k, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            Some((k, rest))
        }
    }
}

fn floats<const N: usize>(key: &str, text: &str) -> Result<[f64; N]> {
    let vals = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::CalibParse(format!("{key}: `{t}` is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != N {
        return Err(Error::CalibParse(format!(
            "{key}: expected {N} values, found {}",
            vals.len()
        )));
    }
    Ok(vals.try_into().unwrap())
}

fn rows<const R: usize, const C: usize>(flat: &[f64]) -> [[f64; C]; R] {
    let mut out = [[0.0; C]; R];
    for (r, row) in out.iter_mut().enumerate() {
        row.copy_from_slice(&flat[r * C..(r + 1) * C]);
    }
    out
}

/// Parses a KITTI `calib.txt`. Keys other than `P2`, `R0_rect` and
/// `Tr_velo_to_cam` are ignored.
pub fn read_calib(text: &str) -> Result<CalibBundle> {
    let entries: HashMap<&str, &str> = text.lines().filter_map(parse_line).collect();
    let get = |key: &str| {
        entries
            .get(key)
            .copied()
            .ok_or_else(|| Error::CalibParse(format!("missing key {key}")))
    };
    let p2: [f64; 12] = floats("P2", get("P2")?)?;
    let r0: [f64; 9] = floats("R0_rect", get("R0_rect")?)?;
    let tr: [f64; 12] = floats("Tr_velo_to_cam", get("Tr_velo_to_cam")?)?;
    Ok(CalibBundle {
        p2: rows(&p2),
        r0_rect: rows(&r0),
        tr_velo_to_cam: rows(&tr),
    })
}

pub fn write_calib(calib: &CalibBundle) -> String {
    fn line(out: &mut String, key: &str, vals: impl Iterator<Item = f64>) {
        out.push_str(key);
        out.push(':');
        for v in vals {
            write!(out, " {v:e}").unwrap();
        }
        out.push('\n');
    }
    let mut out = String::new();
    line(&mut out, "P2", calib.p2.iter().flatten().copied());
    line(&mut out, "R0_rect", calib.r0_rect.iter().flatten().copied());
    line(&mut out, "Tr_velo_to_cam", calib.tr_velo_to_cam.iter().flatten().copied());
    out
}
