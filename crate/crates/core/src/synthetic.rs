//! Seeded synthetic scenes: boxes on a ground plane seen by a ray-cast LiDAR
//! and a ray-cast depth camera, with labels and noisy first-stage proposals.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geometry::{iou_bev, Box3D};
use crate::io::{
    write_calib, write_depth_map, write_labels, write_rgb, write_velodyne, CalibBundle, DepthEncoding, DepthMap,
    LabelRecord, LidarPoint, ObjectClass, RawScan, RgbImage,
};
use crate::nn::seeded_rng;
use crate::projection::{build_projection, ProjectionModel};
use crate::proposals::{write_rpn_proposals, Candidate, LabeledBox, Source};

/// Ground height in the LiDAR frame (m).
pub const GROUND_Z: f64 = -1.73;

const MAX_RANGE: f64 = 70.0;
const SKY: [u8; 3] = [135, 180, 230];
const GROUND: [u8; 3] = [90, 90, 90];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub cars: usize,
    pub pedestrians: usize,
    pub cyclists: usize,
    pub image_size: (usize, usize),
    pub beams: usize,
    /// Elevation range of the beams (degrees).
    pub elevation: (f64, f64),
    /// Horizontal field of view, centered on +x (degrees).
    pub azimuth_fov: f64,
    pub azimuth_step: f64,
    /// Range noise standard deviation (m).
    pub range_noise: f64,
    /// First-stage proposals drawn around each object.
    pub rpn_per_object: usize,
    /// First-stage proposals placed at random.
    pub rpn_clutter: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            cars: 3,
            pedestrians: 1,
            cyclists: 1,
            image_size: (1242, 375),
            beams: 32,
            elevation: (-20.0, 2.0),
            azimuth_fov: 90.0,
            azimuth_step: 0.25,
            range_noise: 0.01,
            rpn_per_object: 8,
            rpn_clutter: 10,
        }
    }
}

pub struct SyntheticScene {
    pub id: String,
    pub calib: CalibBundle,
    pub scan: RawScan,
    pub depth: DepthMap,
    pub rgb: RgbImage,
    pub objects: Vec<LabeledBox>,
    pub labels: Vec<LabelRecord>,
    pub rpn: Vec<Candidate>,
}

/// A typical KITTI color-camera calibration.
pub fn kitti_like_calib() -> CalibBundle {
    CalibBundle {
        p2: [
            [707.0493, 0.0, 604.0814, 45.75831],
            [0.0, 707.0493, 180.5066, -0.3454157],
            [0.0, 0.0, 1.0, 0.004981016],
        ],
        r0_rect: [
            [0.9999128, 0.01009263, -0.008511932],
            [-0.01012729, 0.9999406, -0.004037671],
            [0.008470675, 0.004123522, 0.9999556],
        ],
        tr_velo_to_cam: [
            [0.006927964, -0.9999722, -0.002757829, -0.02457729],
            [-0.001162982, 0.002749836, -0.9999955, -0.06127237],
            [0.9999753, 0.006931141, -0.001143899, -0.3321029],
        ],
    }
}

/// Nearest hit along `o + s d` for `s > 0`: `(s, object index)`, ground is `usize::MAX`.
fn cast(o: [f64; 3], d: [f64; 3], objects: &[LabeledBox]) -> Option<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    if d[2] < 0.0 {
        best = Some(((GROUND_Z - o[2]) / d[2], usize::MAX));
    }
    for (i, obj) in objects.iter().enumerate() {
        let b = &obj.bbox;
        let lo = b.to_local(o);
        let tip = b.to_local([o[0] + d[0], o[1] + d[1], o[2] + d[2]]);
        let ld = [tip[0] - lo[0], tip[1] - lo[1], tip[2] - lo[2]];
        let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for k in 0..3 {
            if ld[k].abs() < 1e-15 {
                if lo[k].abs() > half[k] {
                    t0 = f64::INFINITY;
                }
                continue;
            }
            let a = (-half[k] - lo[k]) / ld[k];
            let c = (half[k] - lo[k]) / ld[k];
            t0 = t0.max(a.min(c));
            t1 = t1.min(a.max(c));
        }
        if t0 <= t1 && t0 > 0.0 && best.is_none_or(|(s, _)| t0 < s) {
            best = Some((t0, i));
        }
    }
    best
}

fn place_objects(cfg: &SyntheticConfig, rng: &mut impl Rng) -> Vec<LabeledBox> {
    let kinds = std::iter::repeat_n((0usize, [3.9, 1.6, 1.56]), cfg.cars)
        .chain(std::iter::repeat_n((1, [0.8, 0.6, 1.75]), cfg.pedestrians))
        .chain(std::iter::repeat_n((2, [1.76, 0.6, 1.73]), cfg.cyclists));
    let mut out: Vec<LabeledBox> = Vec::new();
    for (class_id, size) in kinds {
        for _ in 0..200 {
            let x = rng.random_range(6.0..40.0);
            let y = rng.random_range(-0.6..0.6) * x;
            let s = rng.random_range(0.9..1.1);
            let (l, w, h) = (size[0] * s, size[1] * s, size[2] * s);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let b = Box3D::new([x, y, GROUND_Z + h / 2.0], [l, w, h], yaw);
            let clear = out.iter().all(|o| {
                let gap = 0.5 * (o.bbox.l.hypot(o.bbox.w) + l.hypot(w)) + 0.3;
                (o.bbox.cx - x).hypot(o.bbox.cy - y) > gap
            });
            if clear {
                out.push(LabeledBox { bbox: b, class_id });
                break;
            }
        }
    }
    out
}

fn lidar_scan(cfg: &SyntheticConfig, objects: &[LabeledBox], rng: &mut impl Rng) -> RawScan {
    let noise = Normal::new(0.0, cfg.range_noise.max(0.0)).expect("valid noise");
    let n_az = (cfg.azimuth_fov / cfg.azimuth_step).round() as usize + 1;
    let mut points = Vec::new();
    for beam in 0..cfg.beams {
        let frac = if cfg.beams > 1 { beam as f64 / (cfg.beams - 1) as f64 } else { 0.5 };
        let el = (cfg.elevation.0 + frac * (cfg.elevation.1 - cfg.elevation.0)).to_radians();
        for a in 0..n_az {
            let az = (-cfg.azimuth_fov / 2.0 + a as f64 * cfg.azimuth_step).to_radians();
            let d = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            let Some((s, hit)) = cast([0.0; 3], d, objects) else {
                continue;
            };
            if s > MAX_RANGE {
                continue;
            }
            let s = s + noise.sample(rng);
            points.push(LidarPoint {
                x: (s * d[0]) as f32,
                y: (s * d[1]) as f32,
                z: (s * d[2]) as f32,
                intensity: if hit == usize::MAX { 0.3 } else { 0.8 },
            });
        }
    }
    RawScan { points }
}

fn render(cfg: &SyntheticConfig, proj: &ProjectionModel, objects: &[LabeledBox], colors: &[[u8; 3]]) -> (DepthMap, RgbImage) {
    let (w, h) = cfg.image_size;
    let mut depth = DepthMap::zeros(w, h);
    let mut rgb = RgbImage::filled(w, h, SKY);
    for row in 0..h {
        for col in 0..w {
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            let o = proj.unproject(u, v, 0.0);
            let t = proj.unproject(u, v, 1.0);
            let d = [t[0] - o[0], t[1] - o[1], t[2] - o[2]];
            // The ray parameter equals the camera depth.
            if let Some((s, hit)) = cast(o, d, objects).filter(|(s, _)| *s <= MAX_RANGE) {
                depth.set(col, row, s as f32);
                let c = if hit == usize::MAX { GROUND } else { colors[hit] };
                let i = 3 * (row * w + col);
                rgb.data[i..i + 3].copy_from_slice(&c);
            }
        }
    }
    (depth, rgb)
}

fn proposals(cfg: &SyntheticConfig, objects: &[LabeledBox], rng: &mut impl Rng) -> Vec<Candidate> {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::new();
    for o in objects {
        let b = &o.bbox;
        for _ in 0..cfg.rpn_per_object {
            let mut g = || unit.sample(rng);
            let bbox = Box3D::new(
                [b.cx + 0.15 * b.l * g(), b.cy + 0.15 * b.w * g(), b.cz + 0.1 * b.h * g()],
                [b.l * (0.08 * g()).exp(), b.w * (0.08 * g()).exp(), b.h * (0.08 * g()).exp()],
                b.yaw + 0.1 * g(),
            );
            let score = (iou_bev(&bbox, b) * 0.9 + 0.1 * rng.random::<f64>()).clamp(0.0, 1.0);
            out.push(Candidate { bbox, class_id: o.class_id, score, source: Source::Rpn });
        }
    }
    for _ in 0..cfg.rpn_clutter {
        let x = rng.random_range(5.0..50.0);
        let y = rng.random_range(-0.6..0.6) * x;
        let bbox = Box3D::new([x, y, GROUND_Z + 0.78], [3.9, 1.6, 1.56], rng.random_range(-3.0..3.0));
        out.push(Candidate { bbox, class_id: 0, score: 0.3 * rng.random::<f64>(), source: Source::Rpn });
    }
    out
}

/// Builds scene `id` from `seed`; the same inputs give the same scene.
pub fn synthetic_scene(id: &str, seed: u64, cfg: &SyntheticConfig) -> Result<SyntheticScene> {
    let mut rng = seeded_rng(seed);
    let calib = kitti_like_calib();
    let proj = build_projection(&calib)?;
    let objects = place_objects(cfg, &mut rng);
    let colors: Vec<[u8; 3]> = objects.iter().map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    let scan = lidar_scan(cfg, &objects, &mut rng);
    let (depth, rgb) = render(cfg, &proj, &objects, &colors);
    let rpn = proposals(cfg, &objects, &mut rng);
    let labels = objects
        .iter()
        .map(|o| {
            let class = ObjectClass::from_id(o.class_id).expect("known class");
            proj.lidar_to_label(&o.bbox, class, None, cfg.image_size)
        })
        .collect();
    Ok(SyntheticScene { id: id.to_string(), calib, scan, depth, rgb, objects, labels, rpn })
}

impl SyntheticScene {
    /// The scene as the pipeline would load it from disk.
    pub fn to_scene(&self) -> crate::pipeline::Scene {
        crate::pipeline::Scene {
            id: self.id.clone(),
            scan: self.scan.clone(),
            calib: self.calib.clone(),
            depth: Some(self.depth.clone()),
            rgb: Some(self.rgb.clone()),
            rpn: self.rpn.clone(),
        }
    }
}

/// Writes the scene in the scene-directory layout, plus `label_2/<id>.txt`.
pub fn write_scene(dir: &Path, s: &SyntheticScene) -> Result<()> {
    for sub in ["velodyne", "calib", "depth", "image_2", "proposals", "label_2"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let id = &s.id;
    fs::write(dir.join("velodyne").join(format!("{id}.bin")), write_velodyne(&s.scan))?;
    fs::write(dir.join("calib").join(format!("{id}.txt")), write_calib(&s.calib))?;
    fs::write(dir.join("depth").join(format!("{id}.bin")), write_depth_map(&s.depth, DepthEncoding::F32)?)?;
    fs::write(dir.join("image_2").join(format!("{id}.bin")), write_rgb(&s.rgb))?;
    fs::write(dir.join("proposals").join(format!("{id}.txt")), write_rpn_proposals(&s.rpn))?;
    fs::write(dir.join("label_2").join(format!("{id}.txt")), write_labels(&s.labels))?;
    Ok(())
}
