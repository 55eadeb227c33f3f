//! Balanced confidence and greedy rotated NMS.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::io::ObjectClass;

pub const DEFAULT_BETA: f64 = 0.5;
pub const DEFAULT_NMS_IOU_3D: f64 = 0.1;
pub const DEFAULT_NMS_IOU_BEV: f64 = 0.7;

/// Overlap measure used for suppression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NmsView {
    Bev,
    ThreeD,
}

impl NmsView {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            NmsView::Bev => iou_bev(a, b),
            NmsView::ThreeD => iou_3d(a, b),
        }
    }

    pub fn default_threshold(self) -> f64 {
        match self {
            NmsView::Bev => DEFAULT_NMS_IOU_BEV,
            NmsView::ThreeD => DEFAULT_NMS_IOU_3D,
        }
    }
}

impl std::str::FromStr for NmsView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bev" => Ok(NmsView::Bev),
            "3d" => Ok(NmsView::ThreeD),
            other => Err(Error::config(format!("unknown NMS view `{other}` (expected bev or 3d)"))),
        }
    }
}

/// `cls^(1-beta) * iou^beta`.
pub fn balanced_confidence(cls: f64, iou: f64, beta: f64) -> Result<f64> {
    for (name, v) in [("cls", cls), ("iou", iou), ("beta", beta)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
        }
    }
    // powf(0.0) is 1 even for a zero base, so the endpoints return the other score exactly.
    if beta == 0.0 {
        return Ok(cls);
    }
    if beta == 1.0 {
        return Ok(iou);
    }
    Ok(cls.powf(1.0 - beta) * iou.powf(beta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub bbox: Box3D,
    pub class_id: usize,
    pub cls_score: f64,
    pub iou_score: f64,
    pub confidence: f64,
}

impl ScoredDetection {
    pub fn new(bbox: Box3D, class_id: usize, cls_score: f64, iou_score: f64, beta: f64) -> Result<Self> {
        Ok(ScoredDetection {
            bbox,
            class_id,
            cls_score,
            iou_score,
            confidence: balanced_confidence(cls_score, iou_score, beta)?,
        })
    }
}

/// Indices sorted by descending confidence, ties to the lower index.
pub fn confidence_order(dets: &[ScoredDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS. Returns the kept indices in keep order.
///
/// A detection is suppressed by an earlier kept one of the same class whose
/// overlap strictly exceeds `iou_thresh`.
pub fn nms(dets: &[ScoredDetection], iou_thresh: f64, view: NmsView) -> Vec<usize> {
    let order = confidence_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[rank + 1..] {
            if !suppressed[j]
                && dets[j].class_id == dets[i].class_id
                && view.iou(&dets[i].bbox, &dets[j].bbox) > iou_thresh
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Detection list lines: `class cx cy cz l w h yaw cls iou confidence`.
pub fn write_detections(dets: &[ScoredDetection]) -> String {
    let mut s = String::new();
    for d in dets {
        let b = &d.bbox;
        let class = ObjectClass::from_id(d.class_id).map_or_else(|| d.class_id.to_string(), |o| o.to_string());
        writeln!(
            s,
            "{class} {} {} {} {} {} {} {} {} {} {}",
            b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, d.cls_score, d.iou_score, d.confidence
        )
        .unwrap();
    }
    s
}

/// Reads detection lines with 10 or 11 fields; the confidence is always
/// recomputed from the two scores with `beta`.
pub fn read_detections(text: &str, beta: f64) -> Result<Vec<ScoredDetection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::MalformedFile(format!("detection line {}: {m}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 && f.len() != 11 {
            return Err(bad("expected 10 or 11 fields"));
        }
        let class_id = ObjectClass::parse(f[0]).id().ok_or_else(|| bad("class must be Car, Pedestrian or Cyclist"))?;
        let v: Vec<f64> = f[1..10]
            .iter()
            .map(|x| x.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("bad number")))
            .collect::<Result<_>>()?;
        let bbox = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6]);
        if !bbox.is_valid() {
            return Err(bad("box sizes must be positive"));
        }
        out.push(ScoredDetection::new(bbox, class_id, v[7], v[8], beta).map_err(|e| bad(&e.to_string()))?);
    }
    Ok(out)
}
