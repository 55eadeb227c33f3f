//! Oriented 3D boxes, rotated-rectangle overlap and box residual coding.
//!
//! All boxes use the geometric center in an upright frame (z up). The
//! bird's-eye-view (BEV) footprint of a box is the `l x w` rectangle in the
//! x-y plane rotated by `yaw` around the z axis; `l` lies along the heading.

use std::cmp::Ordering;
use std::f64::consts::PI;

/// Vertices closer than this are merged before computing clipped areas.
pub const VERTEX_MERGE_EPS: f64 = 1e-9;

/// Intersections with a smaller area (m^2) are reported as empty.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

/// Wraps an angle into `(-pi, pi]`. Angles already in range are returned bit-exactly.
pub fn normalize_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Self {
        Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            l: size[0],
            w: size[1],
            h: size[2],
            yaw: normalize_angle(yaw),
        }
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn size(&self) -> [f64; 3] {
        [self.l, self.w, self.h]
    }

    /// Positive finite sizes, finite center and a yaw in `(-pi, pi]`.
    pub fn is_valid(&self) -> bool {
        let finite = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
            .iter()
            .all(|v| v.is_finite());
        finite
            && self.l > 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.yaw > -PI
            && self.yaw <= PI
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn z_min(&self) -> f64 {
        self.cz - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.cz + 0.5 * self.h
    }

    /// Maps a world point into the box frame (x along heading, z up).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.cz]
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.cx + c * local[0] - s * local[1],
            self.cy + s * local[0] + c * local[1],
            self.cz + local[2],
        ]
    }

    /// Closed containment test.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= 0.5 * self.l && q[1].abs() <= 0.5 * self.w && q[2].abs() <= 0.5 * self.h
    }

    /// The eight corners: bottom face CCW, then top face CCW.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let foot = self.bev_corners();
        let mut out = [[0.0; 3]; 8];
        for (i, v) in foot.vertices.iter().enumerate() {
            out[i] = [v[0], v[1], self.z_min()];
            out[i + 4] = [v[0], v[1], self.z_max()];
        }
        out
    }

    pub fn bev_corners(&self) -> Polygon2D {
        bev_corners(self)
    }

    fn total_cmp(&self, other: &Box3D) -> Ordering {
        let a = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw];
        let b = [other.cx, other.cy, other.cz, other.l, other.w, other.h, other.yaw];
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

/// A convex polygon with counter-clockwise vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon2D {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon2D {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    /// Shoelace area; positive for counter-clockwise order.
    pub fn signed_area(&self) -> f64 {
        polygon_signed_area(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Sutherland-Hodgman clip of `self` against the convex CCW `clipper`.
    ///
    /// Near-coincident vertices of the result are merged; an empty polygon is
    /// returned when fewer than three distinct vertices survive.
    pub fn clip(&self, clipper: &Polygon2D) -> Polygon2D {
        let mut output = self.vertices.clone();
        let n = clipper.vertices.len();
        for i in 0..n {
            if output.is_empty() {
                break;
            }
            let a = clipper.vertices[i];
            let b = clipper.vertices[(i + 1) % n];
            let input = std::mem::take(&mut output);
            let side = |p: [f64; 2]| cross(sub(b, a), sub(p, a));
            for j in 0..input.len() {
                let cur = input[j];
                let prev = input[(j + input.len() - 1) % input.len()];
                let s_cur = side(cur);
                let s_prev = side(prev);
                if s_cur >= 0.0 {
                    if s_prev < 0.0 {
                        output.push(segment_intersection(prev, cur, s_prev, s_cur));
                    }
                    output.push(cur);
                } else if s_prev >= 0.0 {
                    output.push(segment_intersection(prev, cur, s_prev, s_cur));
                }
            }
        }
        Polygon2D::new(merge_close_vertices(output))
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

// Point on segment prev->cur where the signed side value crosses zero.
fn segment_intersection(prev: [f64; 2], cur: [f64; 2], s_prev: f64, s_cur: f64) -> [f64; 2] {
    let t = s_prev / (s_prev - s_cur);
    [prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]
}

fn merge_close_vertices(vertices: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let close = |a: [f64; 2], b: [f64; 2]| {
        (a[0] - b[0]).abs() <= VERTEX_MERGE_EPS && (a[1] - b[1]).abs() <= VERTEX_MERGE_EPS
    };
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(vertices.len());
    for v in vertices {
        if out.last().is_none_or(|&last| !close(last, v)) {
            out.push(v);
        }
    }
    while out.len() > 1 && close(out[0], out[out.len() - 1]) {
        out.pop();
    }
    if out.len() < 3 {
        out.clear();
    }
    out
}

fn polygon_signed_area(v: &[[f64; 2]]) -> f64 {
    if v.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..v.len() {
        let a = v[i];
        let b = v[(i + 1) % v.len()];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

/// The four counter-clockwise corners of the box footprint.
pub fn bev_corners(b: &Box3D) -> Polygon2D {
    let (s, c) = b.yaw.sin_cos();
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    Polygon2D::new(
        local
            .iter()
            .map(|p| [b.cx + c * p[0] - s * p[1], b.cy + s * p[0] + c * p[1]])
            .collect(),
    )
}

fn ordered<'a>(a: &'a Box3D, b: &'a Box3D) -> (&'a Box3D, &'a Box3D) {
    if a.total_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    }
}

/// Area of the intersection of the two footprints.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = ordered(a, b);
    // Cheap rejection on circumscribed circles.
    let ra = 0.5 * a.l.hypot(a.w);
    let rb = 0.5 * b.l.hypot(b.w);
    if (a.cx - b.cx).hypot(a.cy - b.cy) > ra + rb {
        return 0.0;
    }
    let area = a.bev_corners().clip(&b.bev_corners()).area();
    if area < MIN_INTERSECTION_AREA {
        0.0
    } else {
        area
    }
}

fn vertical_overlap(a: &Box3D, b: &Box3D) -> f64 {
    (a.z_max().min(b.z_max()) - a.z_min().max(b.z_min())).max(0.0)
}

/// Bird's-eye-view IoU of the two footprints.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a, b) = ordered(a, b);
    let inter = bev_intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.bev_area() + b.bev_area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Volumetric IoU: footprint intersection times vertical overlap.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if a == b {
        return 1.0;
    }
    let (a, b) = ordered(a, b);
    let dz = vertical_overlap(a, b);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|p, q| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2
            && cross(sub(lower[lower.len() - 1], lower[lower.len() - 2]), sub(p, lower[lower.len() - 2])) <= 0.0
        {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2
            && cross(sub(upper[upper.len() - 1], upper[upper.len() - 2]), sub(p, upper[upper.len() - 2])) <= 0.0
        {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Generalized IoU over footprints, using the convex hull as enclosing region.
pub fn giou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = ordered(a, b);
    let iou = iou_bev(a, b);
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    let mut pts = a.bev_corners().vertices;
    pts.extend(b.bev_corners().vertices);
    let hull = polygon_signed_area(&convex_hull(pts)).abs();
    iou - (hull - union) / hull
}

// Diagonal (squared) of the axis-aligned box enclosing both boxes.
fn enclosing_diagonal_sq(a: &Box3D, b: &Box3D) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in a.corners().iter().chain(b.corners().iter()) {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum()
}

/// Distance IoU: 3D IoU minus normalized squared center distance.
pub fn diou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = ordered(a, b);
    let rho2 = (a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2) + (a.cz - b.cz).powi(2);
    iou_3d(a, b) - rho2 / enclosing_diagonal_sq(a, b)
}

/// Complete IoU: DIoU with the footprint aspect-ratio consistency term.
pub fn ciou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a, b) = ordered(a, b);
    let iou = iou_3d(a, b);
    let v = 4.0 / (PI * PI) * ((b.l / b.w).atan() - (a.l / a.w).atan()).powi(2);
    let alpha = if v == 0.0 { 0.0 } else { v / ((1.0 - iou) + v) };
    diou_3d(a, b) - alpha * v
}

/// Seven-slot regression target: center offsets over the proposal footprint
/// diagonal, log size ratios, wrapped yaw difference.
pub type Residual = [f64; 7];

pub fn encode_residual(proposal: &Box3D, target: &Box3D) -> Residual {
    let diag = proposal.l.hypot(proposal.w);
    [
        (target.cx - proposal.cx) / diag,
        (target.cy - proposal.cy) / diag,
        (target.cz - proposal.cz) / diag,
        (target.l / proposal.l).ln(),
        (target.w / proposal.w).ln(),
        (target.h / proposal.h).ln(),
        normalize_angle(target.yaw - proposal.yaw),
    ]
}

pub fn decode_residual(proposal: &Box3D, residual: &Residual) -> Box3D {
    let diag = proposal.l.hypot(proposal.w);
    Box3D {
        cx: proposal.cx + residual[0] * diag,
        cy: proposal.cy + residual[1] * diag,
        cz: proposal.cz + residual[2] * diag,
        l: proposal.l * residual[3].exp(),
        w: proposal.w * residual[4].exp(),
        h: proposal.h * residual[5].exp(),
        yaw: normalize_angle(proposal.yaw + residual[6]),
    }
}
