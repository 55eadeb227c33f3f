//! LiDAR to image mapping and pseudo-point generation from dense depth.
//!
//! The forward model is the single 3x4 matrix
//! `M = P2 * [R0_rect 0; 0 1] * [Tr_velo_to_cam; 0 0 0 1]`, mapping homogeneous
//! LiDAR coordinates to `(u*d, v*d, d)`. Back-projection inverts the left 3x3
//! block of `M` directly, so forward and inverse agree to rounding error.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Box3D};
use crate::io::{CalibBundle, DepthMap, LabelRecord, ObjectClass, RgbImage};

/// Raw LiDAR return.
pub const TAG_RAW: f64 = 0.0;
/// Point back-projected from the depth map.
pub const TAG_PSEUDO: f64 = 1.0;

/// Nine-channel point shared by raw and pseudo clouds.
///
/// Raw points carry `u = v = r = g = b = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PointRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
    pub v: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub tag: f64,
}

impl PointRecord {
    pub const CHANNELS: usize = 9;

    pub fn raw(x: f64, y: f64, z: f64) -> Self {
        Self {
            x,
            y,
            z,
            tag: TAG_RAW,
            ..Default::default()
        }
    }

    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn channels(&self) -> [f64; 9] {
        [self.x, self.y, self.z, self.u, self.v, self.r, self.g, self.b, self.tag]
    }

    pub fn from_channels(c: &[f64]) -> Self {
        Self {
            x: c[0],
            y: c[1],
            z: c[2],
            u: c[3],
            v: c[4],
            r: c[5],
            g: c[6],
            b: c[7],
            tag: c[8],
        }
    }

    pub fn is_pseudo(&self) -> bool {
        self.tag == TAG_PSEUDO
    }
}

/// Result of projecting one LiDAR point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePoint {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    /// False when the point lies on or behind the image plane.
    pub in_front: bool,
}

#[derive(Debug, Clone)]
pub struct ProjectionModel {
    forward: Matrix3x4<f64>,
    block_inv: Matrix3<f64>,
    offset: Vector3<f64>,
    lidar_to_rect: Matrix4<f64>,
    rect_to_lidar: Matrix4<f64>,
    p2: Matrix3x4<f64>,
}

const DET_EPS: f64 = 1e-9;
const ORTHO_TOL: f64 = 1e-3;

fn mat3(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

fn mat34(m: &[[f64; 4]; 3]) -> Matrix3x4<f64> {
    Matrix3x4::from_fn(|r, c| m[r][c])
}

fn rigid(m34: &Matrix3x4<f64>) -> Matrix4<f64> {
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 4>(0, 0).copy_from(m34);
    out
}

/// Composes the KITTI matrices into a [`ProjectionModel`].
pub fn build_projection(calib: &CalibBundle) -> Result<ProjectionModel> {
    let r0 = mat3(&calib.r0_rect);
    if r0.determinant().abs() < DET_EPS {
        return Err(Error::DegenerateCalib("R0_rect is singular".into()));
    }
    if (r0.transpose() * r0 - Matrix3::identity()).abs().max() > ORTHO_TOL {
        return Err(Error::DegenerateCalib("R0_rect is not orthonormal".into()));
    }
    let tr = mat34(&calib.tr_velo_to_cam);
    if tr.fixed_view::<3, 3>(0, 0).determinant().abs() < DET_EPS {
        return Err(Error::DegenerateCalib("Tr_velo_to_cam rotation is singular".into()));
    }
    let p2 = mat34(&calib.p2);
    if !(p2[(0, 0)] > 0.0) {
        return Err(Error::DegenerateCalib("P2 focal length must be positive".into()));
    }

    let mut r0_ext = Matrix4::identity();
    r0_ext.fixed_view_mut::<3, 3>(0, 0).copy_from(&r0);
    let lidar_to_rect = r0_ext * rigid(&tr);
    let rect_to_lidar = lidar_to_rect
        .try_inverse()
        .ok_or_else(|| Error::DegenerateCalib("LiDAR to camera transform is singular".into()))?;
    let forward = p2 * lidar_to_rect;
    let block = forward.fixed_view::<3, 3>(0, 0).into_owned();
    let block_inv = block
        .try_inverse()
        .filter(|_| block.determinant().abs() >= DET_EPS)
        .ok_or_else(|| Error::DegenerateCalib("projection matrix is rank deficient".into()))?;
    Ok(ProjectionModel {
        forward,
        block_inv,
        offset: forward.column(3).into_owned(),
        lidar_to_rect,
        rect_to_lidar,
        p2,
    })
}

impl ProjectionModel {
    /// Row-major copy of the 3x4 forward matrix.
    pub fn forward(&self) -> [[f64; 4]; 3] {
        let mut out = [[0.0; 4]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.forward[(r, c)];
            }
        }
        out
    }

    pub fn fx(&self) -> f64 {
        self.p2[(0, 0)]
    }

    pub fn fy(&self) -> f64 {
        self.p2[(1, 1)]
    }

    pub fn cx(&self) -> f64 {
        self.p2[(0, 2)]
    }

    pub fn cy(&self) -> f64 {
        self.p2[(1, 2)]
    }

    pub fn project(&self, p: [f64; 3]) -> ImagePoint {
        let h = self.forward * Vector4::new(p[0], p[1], p[2], 1.0);
        let depth = h[2];
        let (u, v) = if depth != 0.0 {
            (h[0] / depth, h[1] / depth)
        } else {
            (f64::NAN, f64::NAN)
        };
        ImagePoint {
            u,
            v,
            depth,
            in_front: depth > 0.0,
        }
    }

    /// LiDAR point whose projection is pixel `(u, v)` at homogeneous depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let p = self.block_inv * (Vector3::new(u * depth, v * depth, depth) - self.offset);
        [p[0], p[1], p[2]]
    }

    pub fn lidar_to_rect(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.lidar_to_rect * Vector4::new(p[0], p[1], p[2], 1.0);
        [q[0], q[1], q[2]]
    }

    pub fn rect_to_lidar(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rect_to_lidar * Vector4::new(p[0], p[1], p[2], 1.0);
        [q[0], q[1], q[2]]
    }

    fn rotate_rect_to_lidar(&self, d: [f64; 3]) -> [f64; 3] {
        let q = self.rect_to_lidar * Vector4::new(d[0], d[1], d[2], 0.0);
        [q[0], q[1], q[2]]
    }

    fn rotate_lidar_to_rect(&self, d: [f64; 3]) -> [f64; 3] {
        let q = self.lidar_to_rect * Vector4::new(d[0], d[1], d[2], 0.0);
        [q[0], q[1], q[2]]
    }

    /// Converts a camera-frame KITTI label to a LiDAR-frame box with geometric center.
    pub fn label_to_lidar(&self, label: &LabelRecord) -> Box3D {
        let [h, w, l] = label.dimensions;
        let [x, y, z] = label.location;
        let center = self.rect_to_lidar([x, y - 0.5 * h, z]);
        let (s, c) = label.rotation_y.sin_cos();
        let heading = self.rotate_rect_to_lidar([c, 0.0, -s]);
        Box3D::new(center, [l, w, h], heading[1].atan2(heading[0]))
    }

    /// Converts a LiDAR-frame box to a KITTI result record. The 2D box is the
    /// bounding rectangle of the projected corners clipped to `image_size`.
    pub fn lidar_to_label(
        &self,
        b: &Box3D,
        class: ObjectClass,
        score: Option<f64>,
        image_size: (usize, usize),
    ) -> LabelRecord {
        let c = self.lidar_to_rect(b.center());
        let (s, co) = b.yaw.sin_cos();
        let d = self.rotate_lidar_to_rect([co, s, 0.0]);
        let rotation_y = normalize_angle((-d[2]).atan2(d[0]));
        let (mut u1, mut v1, mut u2, mut v2) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for corner in b.corners() {
            let ip = self.project(corner);
            if ip.in_front {
                u1 = u1.min(ip.u);
                v1 = v1.min(ip.v);
                u2 = u2.max(ip.u);
                v2 = v2.max(ip.v);
            }
        }
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let bbox2d = if u1 <= u2 {
            [u1.clamp(0.0, w), v1.clamp(0.0, h), u2.clamp(0.0, w), v2.clamp(0.0, h)]
        } else {
            [0.0; 4]
        };
        let alpha = normalize_angle(rotation_y - c[0].atan2(c[2]));
        LabelRecord {
            class,
            truncation: 0.0,
            occlusion: 0,
            alpha: if alpha.is_finite() { alpha } else { -PI / 2.0 },
            bbox2d,
            dimensions: [b.h, b.w, b.l],
            location: [c[0], c[1] + 0.5 * b.h, c[2]],
            rotation_y,
            score,
        }
    }
}

/// Projects LiDAR points; points on or behind the image plane are flagged, not dropped.
pub fn project_to_image(model: &ProjectionModel, points: &[[f64; 3]]) -> Vec<ImagePoint> {
    points.iter().map(|&p| model.project(p)).collect()
}

/// Back-projects every `stride`-th pixel (in both directions) with positive depth.
///
/// Pixels are addressed at their centers: column `c` maps to `u = c + 0.5`.
/// Output is row-major.
pub fn depth_to_pseudo_points(
    model: &ProjectionModel,
    depth: &DepthMap,
    rgb: &RgbImage,
    stride: usize,
) -> Result<Vec<PointRecord>> {
    if stride == 0 {
        return Err(Error::config("pseudo-point stride must be at least 1"));
    }
    if depth.width != rgb.width || depth.height != rgb.height {
        return Err(Error::shape(format!(
            "depth map is {}x{} but image is {}x{}",
            depth.width, depth.height, rgb.width, rgb.height
        )));
    }
    if depth.depth.len() != depth.width * depth.height {
        return Err(Error::shape("depth buffer does not match its dimensions"));
    }
    let mut out = Vec::new();
    for row in (0..depth.height).step_by(stride) {
        for col in (0..depth.width).step_by(stride) {
            let d = depth.get(col, row) as f64;
            if d <= 0.0 {
                continue;
            }
            let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
            let [x, y, z] = model.unproject(u, v, d);
            let [r, g, b] = rgb.pixel(col, row);
            out.push(PointRecord {
                x,
                y,
                z,
                u,
                v,
                r: r as f64 / 255.0,
                g: g as f64 / 255.0,
                b: b as f64 / 255.0,
                tag: TAG_PSEUDO,
            });
        }
    }
    Ok(out)
}

/// Axis-aligned half-open region `[min, max)` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRange {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl PointRange {
    /// KITTI detection region: x forward in [0, 70.4), y left in [-40, 40), z in [-3, 1).
    pub const KITTI: PointRange = PointRange {
        min: [0.0, -40.0, -3.0],
        max: [70.4, 40.0, 1.0],
    };

    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for k in 0..3 {
            if !(min[k] < max[k]) {
                return Err(Error::config(format!(
                    "range axis {k} is inverted or empty: [{}, {})",
                    min[k], max[k]
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] < self.max[k])
    }
}

/// Keeps points inside `range`, preserving order.
pub fn crop_to_range(points: &[PointRecord], range: &PointRange) -> Result<Vec<PointRecord>> {
    let range = PointRange::new(range.min, range.max)?;
    Ok(points.iter().filter(|p| range.contains(p.xyz())).copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_calib;

    fn pinhole(f: f64, cx: f64, cy: f64) -> CalibBundle {
        let mut c = CalibBundle::identity();
        c.p2 = [[f, 0.0, cx, 0.0], [0.0, f, cy, 0.0], [0.0, 0.0, 1.0, 0.0]];
        c
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let m = build_projection(&CalibBundle::identity()).unwrap();
        let ip = m.project([0.0, 0.0, 1.0]);
        assert_eq!((ip.u, ip.v, ip.depth), (0.0, 0.0, 1.0));
        let m = build_projection(&pinhole(700.0, 600.0, 180.0)).unwrap();
        let ip = m.project([0.0, 0.0, 7.5]);
        assert_eq!((ip.u, ip.v, ip.depth), (600.0, 180.0, 7.5));
        assert!(ip.in_front);
    }

    #[test]
    fn behind_camera_flagged() {
        let m = build_projection(&pinhole(700.0, 600.0, 180.0)).unwrap();
        assert!(!m.project([1.0, 1.0, -2.0]).in_front);
        assert!(!m.project([1.0, 1.0, 0.0]).in_front);
    }

    #[test]
    fn rank_deficient_rectification() {
        let mut c = CalibBundle::identity();
        c.r0_rect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        assert!(matches!(build_projection(&c), Err(Error::DegenerateCalib(_))));
    }

    #[test]
    fn kitti_projection_matches_matrix_product() {
        let calib = read_calib(include_str!("../tests/fixtures/kitti_calib.txt")).unwrap();
        let m = build_projection(&calib).unwrap();
        let p = [12.3, -1.7, -0.8];
        // Explicit 4x4 products in plain arrays.
        let tr = calib.tr_velo_to_cam;
        let cam: Vec<f64> = (0..3)
            .map(|r| tr[r][0] * p[0] + tr[r][1] * p[1] + tr[r][2] * p[2] + tr[r][3])
            .collect();
        let rect: Vec<f64> = (0..3)
            .map(|r| (0..3).map(|k| calib.r0_rect[r][k] * cam[k]).sum())
            .collect();
        let img: Vec<f64> = (0..3)
            .map(|r| (0..3).map(|k| calib.p2[r][k] * rect[k]).sum::<f64>() + calib.p2[r][3])
            .collect();
        let ip = m.project(p);
        assert!((ip.u - img[0] / img[2]).abs() < 1e-9);
        assert!((ip.v - img[1] / img[2]).abs() < 1e-9);
        assert!((ip.depth - img[2]).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_at_principal_point() {
        // Principal point on the center of pixel (2, 1).
        let m = build_projection(&pinhole(10.0, 2.5, 1.5)).unwrap();
        let mut depth = DepthMap::zeros(5, 3);
        depth.set(2, 1, 5.0);
        let rgb = RgbImage::filled(5, 3, [255, 0, 51]);
        let pts = depth_to_pseudo_points(&m, &depth, &rgb, 1).unwrap();
        assert_eq!(pts.len(), 1);
        let p = pts[0];
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12 && (p.z - 5.0).abs() < 1e-12);
        assert_eq!((p.u, p.v), (2.5, 1.5));
        assert_eq!((p.r, p.g, p.b, p.tag), (1.0, 0.0, 0.2, TAG_PSEUDO));
    }

    #[test]
    fn missing_depth_gives_no_points() {
        let m = build_projection(&pinhole(10.0, 2.5, 1.5)).unwrap();
        let pts = depth_to_pseudo_points(&m, &DepthMap::zeros(5, 3), &RgbImage::filled(5, 3, [0; 3]), 1);
        assert!(pts.unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch() {
        let m = build_projection(&pinhole(10.0, 2.5, 1.5)).unwrap();
        let r = depth_to_pseudo_points(&m, &DepthMap::zeros(5, 3), &RgbImage::filled(4, 3, [0; 3]), 1);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn stride_subsamples() {
        let m = build_projection(&pinhole(10.0, 2.5, 1.5)).unwrap();
        let mut depth = DepthMap::zeros(5, 3);
        depth.depth.iter_mut().for_each(|d| *d = 4.0);
        let pts = depth_to_pseudo_points(&m, &depth, &RgbImage::filled(5, 3, [0; 3]), 2).unwrap();
        // columns 0,2,4 x rows 0,2
        assert_eq!(pts.len(), 6);
    }

    #[test]
    fn crop_half_open() {
        let r = PointRange::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap();
        let pts = vec![PointRecord::raw(1.0, 0.5, 0.5), PointRecord::raw(0.0, 0.5, 0.5)];
        assert_eq!(crop_to_range(&pts, &r).unwrap(), vec![pts[1]]);
        let inside = vec![PointRecord::raw(0.2, 0.2, 0.2), PointRecord::raw(0.9, 0.1, 0.0)];
        assert_eq!(crop_to_range(&inside, &r).unwrap(), inside);
        assert!(PointRange::new([1.0, 0.0, 0.0], [0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn label_lidar_round_trip() {
        let calib = read_calib(include_str!("../tests/fixtures/kitti_calib.txt")).unwrap();
        let m = build_projection(&calib).unwrap();
        let label = crate::io::read_labels(
            "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59",
        )
        .unwrap()
        .remove(0);
        let b = m.label_to_lidar(&label);
        // Roughly 46 m ahead of the sensor, centered above the ground.
        assert!((b.cx - 47.0).abs() < 1.0 && b.cz < 0.0);
        let back = m.lidar_to_label(&b, ObjectClass::Car, Some(1.0), (1242, 375));
        for k in 0..3 {
            assert!((back.location[k] - label.location[k]).abs() < 1e-9);
        }
        // Calibration rotations are only near-orthonormal; heading survives to ~1e-3 rad.
        assert!((back.rotation_y - label.rotation_y).abs() < 5e-3);
        assert!(back.bbox2d[0] < back.bbox2d[2]);
    }
}
