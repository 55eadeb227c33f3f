use std::f64::consts::FRAC_PI_2;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
    DontCare,
    /// Any other KITTI type (`Van`, `Truck`, `Person_sitting`, ...), name kept verbatim.
    Other(String),
}

impl ObjectClass {
    pub fn parse(name: &str) -> Self {
        match name {
            "Car" => ObjectClass::Car,
            "Pedestrian" => ObjectClass::Pedestrian,
            "Cyclist" => ObjectClass::Cyclist,
            "DontCare" => ObjectClass::DontCare,
            other => ObjectClass::Other(other.to_string()),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
            ObjectClass::DontCare => "DontCare",
            ObjectClass::Other(s) => s,
        }
    }

    /// Dense id for the three evaluated classes.
    pub fn id(&self) -> Option<usize> {
        match self {
            ObjectClass::Car => Some(0),
            ObjectClass::Pedestrian => Some(1),
            ObjectClass::Cyclist => Some(2),
            _ => None,
        }
    }

    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(ObjectClass::Car),
            1 => Some(ObjectClass::Pedestrian),
            2 => Some(ObjectClass::Cyclist),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One line of a KITTI `label_2` (or result) file, fields kept in camera coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub class: ObjectClass,
    pub truncation: f64,
    /// 0 fully visible .. 3 unknown; DontCare rows carry -1.
    pub occlusion: i32,
    pub alpha: f64,
    /// `(u1, v1, u2, v2)` in pixels.
    pub bbox2d: [f64; 4],
    /// `(h, w, l)` in meters.
    pub dimensions: [f64; 3],
    /// Bottom-center of the box in rectified camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }

    /// The box in the calibration-free upright camera frame
    /// `(z_cam, -x_cam, -y_cam)`, centered geometrically.
    ///
    /// This frame is a rigid relabeling of camera axes, so IoU and center
    /// distances are the same as in camera coordinates.
    pub fn to_box(&self) -> Box3D {
        let [h, w, l] = self.dimensions;
        let [x, y, z] = self.location;
        Box3D::new([z, -x, 0.5 * h - y], [l, w, h], -self.rotation_y - FRAC_PI_2)
    }

    /// Inverse of [`LabelRecord::to_box`] for the geometric fields.
    pub fn set_box(&mut self, b: &Box3D) {
        self.dimensions = [b.h, b.w, b.l];
        self.location = [-b.cy, 0.5 * b.h - b.cz, b.cx];
        self.rotation_y = normalize_angle(-b.yaw - FRAC_PI_2);
    }
}

fn field<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::LabelParse {
        line,
        message: format!("{what}: `{tok}` is not valid"),
    })
}

fn parse_record(text: &str, line: usize) -> Result<LabelRecord> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 15 && toks.len() != 16 {
        return Err(Error::LabelParse {
            line,
            message: format!("expected 15 or 16 fields, found {}", toks.len()),
        });
    }
    let f = |i: usize, what: &str| field::<f64>(toks[i], line, what);
    let rec = LabelRecord {
        class: ObjectClass::parse(toks[0]),
        truncation: f(1, "truncation")?,
        occlusion: field::<i32>(toks[2], line, "occlusion")?,
        alpha: f(3, "alpha")?,
        bbox2d: [f(4, "bbox")?, f(5, "bbox")?, f(6, "bbox")?, f(7, "bbox")?],
        dimensions: [f(8, "height")?, f(9, "width")?, f(10, "length")?],
        location: [f(11, "x")?, f(12, "y")?, f(13, "z")?],
        rotation_y: f(14, "rotation_y")?,
        score: if toks.len() == 16 { Some(f(15, "score")?) } else { None },
    };
    let bad = |message: &str| Error::LabelParse {
        line,
        message: message.to_string(),
    };
    if rec.bbox2d[0] > rec.bbox2d[2] || rec.bbox2d[1] > rec.bbox2d[3] {
        return Err(bad("bbox corners are inverted"));
    }
    if rec.class != ObjectClass::DontCare {
        if rec.dimensions.iter().any(|&d| d <= 0.0) {
            return Err(bad("box dimensions must be positive"));
        }
        if !(-1..=3).contains(&rec.occlusion) {
            return Err(bad("occlusion must be in 0..=3"));
        }
    }
    Ok(rec)
}

/// Parses KITTI label text; blank lines are skipped, line numbers are 1-based.
pub fn read_labels(text: &str) -> Result<Vec<LabelRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

/// Writes labels (or results, when `score` is set) one per line.
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            r.class,
            r.truncation,
            r.occlusion,
            r.alpha,
            r.bbox2d[0],
            r.bbox2d[1],
            r.bbox2d[2],
            r.bbox2d[3],
            r.dimensions[0],
            r.dimensions[1],
            r.dimensions[2],
            r.location[0],
            r.location[1],
            r.location[2],
            r.rotation_y
        )
        .unwrap();
        if let Some(s) = r.score {
            write!(out, " {s}").unwrap();
        }
        out.push('\n');
    }
    out
}
