//! KITTI-protocol evaluation: greedy matching, 40-point interpolated AP,
//! difficulty levels and distance buckets.
//!
//! A difficulty level is cumulative as in the public KITTI kit: evaluating at
//! Moderate counts Easy and Moderate objects and ignores Hard ones. The
//! partition returned by [`stratify`] assigns each object to the easiest level
//! it satisfies instead.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, iou_bev, Box3D};
use crate::io::{LabelRecord, ObjectClass};

pub const RECALL_POSITIONS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyRule {
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Bev,
    ThreeD,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Bev => "bev",
            Metric::ThreeD => "3d",
        }
    }

    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            Metric::Bev => iou_bev(a, b),
            Metric::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// IoU threshold per class id (Car, Pedestrian, Cyclist).
    pub thresholds: [f64; 3],
    pub recall_positions: usize,
    /// Rules for Easy, Moderate, Hard.
    pub rules: [DifficultyRule; 3],
    /// Lower edges of the distance buckets; the last bucket is open-ended.
    pub distance_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            thresholds: [0.7, 0.5, 0.5],
            recall_positions: RECALL_POSITIONS,
            rules: [
                DifficultyRule { min_height: 40.0, max_occlusion: 0, max_truncation: 0.15 },
                DifficultyRule { min_height: 25.0, max_occlusion: 1, max_truncation: 0.3 },
                DifficultyRule { min_height: 25.0, max_occlusion: 2, max_truncation: 0.5 },
            ],
            distance_edges: vec![0.0, 10.0, 40.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::config("IoU thresholds must lie in (0, 1]"));
        }
        if self.recall_positions == 0 {
            return Err(Error::config("at least one recall position is required"));
        }
        if self.distance_edges.is_empty() || self.distance_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("distance bucket edges must be non-empty and strictly increasing"));
        }
        Ok(())
    }

    pub fn rule(&self, d: Difficulty) -> &DifficultyRule {
        &self.rules[d as usize]
    }

    /// Bucket index of a distance, `None` below the first edge.
    pub fn bucket(&self, distance: f64) -> Option<usize> {
        self.distance_edges.iter().rposition(|&e| distance >= e)
    }

    pub fn bucket_name(&self, b: usize) -> String {
        match self.distance_edges.get(b + 1) {
            Some(hi) => format!("{}-{}", self.distance_edges[b], hi),
            None => format!("{}-inf", self.distance_edges[b]),
        }
    }
}

/// Easiest level whose rule the label satisfies, `None` if it meets no level.
pub fn difficulty_of(label: &LabelRecord, cfg: &EvalConfig) -> Option<Difficulty> {
    Difficulty::ALL.into_iter().find(|&d| {
        let r = cfg.rule(d);
        label.bbox_height() >= r.min_height && label.occlusion <= r.max_occlusion && label.truncation <= r.max_truncation
    })
}

/// Ground-plane range of the box center from the sensor.
pub fn distance_of(label: &LabelRecord) -> f64 {
    let [x, _, z] = label.location;
    x.hypot(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratifyBy {
    Difficulty,
    Distance,
}

/// Partitions the non-DontCare labels. Stratum names are the difficulty names
/// plus `unrated`, or the bucket names.
pub fn stratify(gts: &[LabelRecord], by: StratifyBy, cfg: &EvalConfig) -> Vec<(String, Vec<usize>)> {
    let mut strata: Vec<(String, Vec<usize>)> = match by {
        StratifyBy::Difficulty => Difficulty::ALL
            .iter()
            .map(|d| d.name().to_string())
            .chain(["unrated".to_string()])
            .map(|n| (n, Vec::new()))
            .collect(),
        StratifyBy::Distance => (0..cfg.distance_edges.len()).map(|b| (cfg.bucket_name(b), Vec::new())).collect(),
    };
    for (i, g) in gts.iter().enumerate() {
        if g.class == ObjectClass::DontCare {
            continue;
        }
        let slot = match by {
            StratifyBy::Difficulty => difficulty_of(g, cfg).map_or(3, |d| d as usize),
            // Distances below the first edge fall in the first bucket.
            StratifyBy::Distance => cfg.bucket(distance_of(g)).unwrap_or(0),
        };
        strata[slot].1.push(i);
    }
    strata
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GtRole {
    Valid,
    /// Absorbs matching detections without counting them.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDetection {
    pub bbox: Box3D,
    pub confidence: f64,
    /// Drop the detection rather than count it as FP when nothing valid matches.
    pub ignore_unmatched: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneMatches {
    pub outcomes: Vec<DetOutcome>,
    pub confidences: Vec<f64>,
    /// Matched GT index per detection, for true positives.
    pub matched_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    pub num_valid_gt: usize,
}

impl SceneMatches {
    pub fn count(&self, o: DetOutcome) -> usize {
        self.outcomes.iter().filter(|&&x| x == o).count()
    }
}

/// Greedy matching in descending confidence (ties to the lower index). Each
/// detection takes the highest-IoU unmatched valid GT with IoU at least
/// `thresh`; failing that, an overlap of at least `thresh` with an ignored GT
/// makes it ignored.
pub fn match_detections(
    dets: &[EvalDetection],
    gts: &[(Box3D, GtRole)],
    iou_fn: impl Fn(&Box3D, &Box3D) -> f64,
    thresh: f64,
) -> SceneMatches {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence).then(a.cmp(&b)));
    let mut out = SceneMatches {
        outcomes: vec![DetOutcome::FalsePositive; dets.len()],
        confidences: dets.iter().map(|d| d.confidence).collect(),
        matched_gt: vec![None; dets.len()],
        gt_matched: vec![false; gts.len()],
        num_valid_gt: gts.iter().filter(|g| g.1 == GtRole::Valid).count(),
    };
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (j, (g, role)) in gts.iter().enumerate() {
            let iou = iou_fn(&d.bbox, g);
            if iou < thresh {
                continue;
            }
            match role {
                GtRole::Valid if !out.gt_matched[j] => {
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((j, iou));
                    }
                }
                GtRole::Valid => {}
                GtRole::Ignored => hits_ignored = true,
            }
        }
        out.outcomes[i] = if let Some((j, _)) = best {
            out.gt_matched[j] = true;
            out.matched_gt[i] = Some(j);
            DetOutcome::TruePositive
        } else if hits_ignored || d.ignore_unmatched {
            DetOutcome::Ignored
        } else {
            DetOutcome::FalsePositive
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `i / positions` for `i = 1..=positions`.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
}

/// Interpolated AP over pooled matches; `None` when there is no valid GT.
///
/// Detections sharing a confidence form one threshold step. The precision at
/// recall position `i / R` is the best precision over steps whose recall
/// reaches it, compared in integers as `tp * R >= i * n_gt`.
pub fn ap_r40(scenes: &[SceneMatches], positions: usize) -> Option<PrCurve> {
    let n_gt: usize = scenes.iter().map(|s| s.num_valid_gt).sum();
    if n_gt == 0 || positions == 0 {
        return None;
    }
    let mut scored: Vec<(f64, bool)> = scenes
        .iter()
        .flat_map(|s| {
            s.outcomes
                .iter()
                .zip(&s.confidences)
                .filter(|(o, _)| **o != DetOutcome::Ignored)
                .map(|(o, &c)| (c, *o == DetOutcome::TruePositive))
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut steps: Vec<(usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &(c, is_tp)) in scored.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if scored.get(k + 1).is_none_or(|n| n.0 != c) {
            steps.push((tp, fp));
        }
    }
    let precision: Vec<f64> = (1..=positions)
        .map(|i| {
            steps
                .iter()
                .filter(|&&(tp, _)| tp * positions >= i * n_gt)
                .map(|&(tp, fp)| tp as f64 / (tp + fp) as f64)
                .fold(0.0, f64::max)
        })
        .collect();
    let ap = precision.iter().sum::<f64>() / positions as f64;
    Some(PrCurve {
        recall: (1..=positions).map(|i| i as f64 / positions as f64).collect(),
        precision,
        ap,
    })
}

/// Labels of other types treated as ignored for a class.
fn is_neighbor(class_id: usize, c: &ObjectClass) -> bool {
    matches!(
        (class_id, c),
        (0, ObjectClass::Other(n)) if n == "Van"
    ) || matches!((class_id, c), (1, ObjectClass::Other(n)) if n == "Person_sitting")
}

/// Which slice of a scene is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stratum {
    pub class_id: usize,
    pub difficulty: Difficulty,
    pub bucket: Option<usize>,
}

/// Matches one scene's results against its labels for one stratum.
///
/// Valid GTs are labels of the class that meet the difficulty level and lie in
/// the bucket; same-class labels failing either, neighbouring types and
/// DontCare regions with a valid box are ignored. Unmatched detections that
/// are too short for the level or outside the bucket are dropped.
pub fn match_scene(
    dets: &[LabelRecord],
    gts: &[LabelRecord],
    stratum: Stratum,
    metric: Metric,
    cfg: &EvalConfig,
) -> SceneMatches {
    let class = ObjectClass::from_id(stratum.class_id);
    let rule = cfg.rule(stratum.difficulty);
    let in_bucket = |l: &LabelRecord| stratum.bucket.is_none_or(|b| cfg.bucket(distance_of(l)).unwrap_or(0) == b);
    let gt_entries: Vec<(Box3D, GtRole)> = gts
        .iter()
        .filter_map(|g| {
            if Some(&g.class) == class.as_ref() {
                let valid = difficulty_of(g, cfg).is_some_and(|d| d <= stratum.difficulty) && in_bucket(g);
                Some((g.to_box(), if valid { GtRole::Valid } else { GtRole::Ignored }))
            } else if is_neighbor(stratum.class_id, &g.class)
                || (g.class == ObjectClass::DontCare && g.dimensions.iter().all(|&d| d > 0.0))
            {
                Some((g.to_box(), GtRole::Ignored))
            } else {
                None
            }
        })
        .collect();
    let det_entries: Vec<EvalDetection> = dets
        .iter()
        .filter(|d| Some(&d.class) == class.as_ref())
        .map(|d| EvalDetection {
            bbox: d.to_box(),
            confidence: d.score.unwrap_or(1.0),
            ignore_unmatched: d.bbox_height() < rule.min_height || !in_bucket(d),
        })
        .collect();
    match_detections(&det_entries, &gt_entries, |a, b| metric.iou(a, b), cfg.thresholds[stratum.class_id])
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub class_id: usize,
    pub difficulty: Difficulty,
    pub bucket: Option<usize>,
    pub metric: Metric,
    pub num_gt: usize,
    pub ap: Option<f64>,
}

/// One scene: its results and its labels.
pub struct EvalScene<'a> {
    pub dets: &'a [LabelRecord],
    pub gts: &'a [LabelRecord],
}

/// AP for every class x difficulty x (all distances, each bucket) x metric.
pub fn evaluate(scenes: &[EvalScene<'_>], cfg: &EvalConfig) -> Result<Vec<EvalRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let buckets: Vec<Option<usize>> = std::iter::once(None).chain((0..cfg.distance_edges.len()).map(Some)).collect();
    for class_id in 0..3 {
        for metric in [Metric::Bev, Metric::ThreeD] {
            for &bucket in &buckets {
                for difficulty in Difficulty::ALL {
                    let stratum = Stratum { class_id, difficulty, bucket };
                    let matches: Vec<SceneMatches> = scenes
                        .par_iter()
                        .map(|s| match_scene(s.dets, s.gts, stratum, metric, cfg))
                        .collect();
                    rows.push(EvalRow {
                        class_id,
                        difficulty,
                        bucket,
                        metric,
                        num_gt: matches.iter().map(|m| m.num_valid_gt).sum(),
                        ap: ap_r40(&matches, cfg.recall_positions).map(|c| c.ap),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "class,difficulty,distance,metric,num_gt,ap";

/// CSV summary; AP is printed with six decimals or `n/a`.
pub fn rows_to_csv(rows: &[EvalRow], cfg: &EvalConfig) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let class = ObjectClass::from_id(r.class_id).map_or_else(|| r.class_id.to_string(), |c| c.to_string());
        let distance = r.bucket.map_or_else(|| "all".to_string(), |b| cfg.bucket_name(b));
        let ap = r.ap.map_or_else(|| "n/a".to_string(), |a| format!("{a:.6}"));
        writeln!(out, "{class},{},{distance},{},{},{ap}", r.difficulty.name(), r.metric.name(), r.num_gt).unwrap();
    }
    out
}
