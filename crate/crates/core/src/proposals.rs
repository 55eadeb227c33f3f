//! Ground-truth based proposal generation with IoU quotas, mixing with
//! first-stage proposals, and refinement target assignment.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{encode_residual, iou_3d, normalize_angle, Box3D, Residual};
use crate::io::ObjectClass;
use crate::nn::seeded_rng;
use crate::refine::Proposal;

/// Number of IoU intervals each ground truth is sampled into.
pub const INTERVALS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    /// Proposals per ground truth, split evenly over the intervals.
    pub per_gt: usize,
    /// Lower IoU bound `a^t` for each iteration; `[a^t, 1)` is split evenly.
    pub lower_bounds: Vec<f64>,
    /// Center noise standard deviation as a fraction of the box size per axis.
    pub sigma_loc: f64,
    /// Standard deviation of the log size ratio.
    pub sigma_size: f64,
    /// Yaw noise standard deviation (rad).
    pub sigma_yaw: f64,
    /// Smallest per-candidate factor applied to all three noise scales.
    /// Factors are log-uniform on `[shrink_min, 1]`; `1.0` disables shrinking.
    pub shrink_min: f64,
    /// Draws allowed per interval.
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            per_gt: 100,
            lower_bounds: vec![0.5, 0.6, 0.7],
            sigma_loc: 0.3,
            sigma_size: 0.15,
            sigma_yaw: 0.2,
            shrink_min: 1e-3,
            max_attempts: 1000,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_gt == 0 || self.per_gt % INTERVALS != 0 {
            return Err(Error::config(format!(
                "proposals per ground truth ({}) must be a positive multiple of {INTERVALS}",
                self.per_gt
            )));
        }
        if self.lower_bounds.is_empty() || self.lower_bounds.iter().any(|a| !(0.0..1.0).contains(a)) {
            return Err(Error::config("IoU lower bounds must lie in [0, 1)"));
        }
        let sig = [self.sigma_loc, self.sigma_size, self.sigma_yaw];
        if sig.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("noise scales must be finite and non-negative"));
        }
        if !(self.shrink_min > 0.0 && self.shrink_min <= 1.0) {
            return Err(Error::config("shrink_min must lie in (0, 1]"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts must be positive"));
        }
        Ok(())
    }

    /// The half-open IoU intervals of iteration `t` (1-based).
    pub fn intervals(&self, t: usize) -> Result<[(f64, f64); INTERVALS]> {
        let a = *self
            .lower_bounds
            .get(t.wrapping_sub(1))
            .ok_or_else(|| Error::config(format!("no IoU schedule for iteration {t}")))?;
        let step = (1.0 - a) / INTERVALS as f64;
        let edge = |i: usize| if i == INTERVALS { 1.0 } else { a + step * i as f64 };
        Ok(std::array::from_fn(|i| (edge(i), edge(i + 1))))
    }
}

/// A box with a class id, used for ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledBox {
    pub bbox: Box3D,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Generated { gt_index: usize, interval: usize },
    Rpn,
}

/// A proposal and where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub bbox: Box3D,
    pub class_id: usize,
    pub score: f64,
    pub source: Source,
}

impl Candidate {
    pub fn proposal(&self) -> Proposal {
        Proposal {
            bbox: self.bbox,
            class_id: self.class_id,
        }
    }

    pub fn interval(&self) -> Option<usize> {
        match self.source {
            Source::Generated { interval, .. } => Some(interval),
            Source::Rpn => None,
        }
    }
}

fn perturb(gt: &Box3D, cfg: &GenerationConfig, rng: &mut impl Rng) -> Box3D {
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let ln_min = cfg.shrink_min.ln();
    let lambda = if ln_min == 0.0 { 1.0 } else { rng.random_range(ln_min..=0.0).exp() };
    let (sl, ss, sy) = (lambda * cfg.sigma_loc, lambda * cfg.sigma_size, lambda * cfg.sigma_yaw);
    let mut n = || unit.sample(rng);
    Box3D {
        cx: gt.cx + sl * gt.l * n(),
        cy: gt.cy + sl * gt.w * n(),
        cz: gt.cz + sl * gt.h * n(),
        l: gt.l * (ss * n()).exp(),
        w: gt.w * (ss * n()).exp(),
        h: gt.h * (ss * n()).exp(),
        yaw: normalize_angle(gt.yaw + sy * n()),
    }
}

/// Rejection-samples `per_gt / 4` perturbed boxes per IoU interval of
/// iteration `t` around every ground truth. Ground truth `i` draws from its
/// own stream seeded with `seed ^ i`, so results do not depend on threading.
pub fn generate_uniform_proposals(gt: &[LabeledBox], cfg: &GenerationConfig, t: usize) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    let intervals = cfg.intervals(t)?;
    let quota = cfg.per_gt / INTERVALS;
    let per_gt: Vec<Result<Vec<Candidate>>> = gt
        .par_iter()
        .enumerate()
        .map(|(gi, g)| {
            let mut rng = seeded_rng(cfg.seed ^ gi as u64);
            let mut out = Vec::with_capacity(cfg.per_gt);
            for (ii, &(lower, upper)) in intervals.iter().enumerate() {
                let mut filled = 0;
                let mut attempts = 0;
                while filled < quota && attempts < cfg.max_attempts {
                    attempts += 1;
                    let b = perturb(&g.bbox, cfg, &mut rng);
                    let iou = iou_3d(&b, &g.bbox);
                    if iou >= lower && iou < upper {
                        out.push(Candidate {
                            bbox: b,
                            class_id: g.class_id,
                            score: iou,
                            source: Source::Generated { gt_index: gi, interval: ii },
                        });
                        filled += 1;
                    }
                }
                if filled < quota {
                    return Err(Error::GenerationShortfall {
                        gt_index: gi,
                        interval: ii,
                        lower,
                        upper,
                        filled,
                        quota,
                        attempts,
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(gt.len() * cfg.per_gt);
    for r in per_gt {
        all.extend(r?);
    }
    Ok(all)
}

/// `n_sp` generated proposals drawn without replacement from `seed`, then the
/// best-scoring first-stage proposals up to `total`. Short lists are padded
/// by cycling through the selection.
pub fn mix_with_rpn(generated: &[Candidate], rpn: &[Candidate], n_sp: usize, total: usize, seed: u64) -> Result<Vec<Candidate>> {
    if n_sp > total {
        return Err(Error::config(format!("{n_sp} generated proposals exceed the total of {total}")));
    }
    let mut rng = seeded_rng(seed);
    let take = n_sp.min(generated.len());
    let mut picked: Vec<usize> = sample(&mut rng, generated.len(), take).into_vec();
    picked.sort_unstable();
    let mut out: Vec<Candidate> = picked.iter().map(|&i| generated[i]).collect();

    let mut order: Vec<usize> = (0..rpn.len()).collect();
    order.sort_by(|&a, &b| rpn[b].score.total_cmp(&rpn[a].score).then(a.cmp(&b)));
    out.extend(order.iter().take(total - n_sp).map(|&i| rpn[i]));

    if out.is_empty() {
        return if total == 0 { Ok(out) } else { Err(Error::EmptyScene) };
    }
    let have = out.len();
    for i in have..total {
        out.push(out[i % have]);
    }
    Ok(out)
}

/// Foreground IoU threshold for a class id (Car 0.7, others 0.5).
pub fn foreground_threshold(class_id: usize) -> f64 {
    if class_id == 0 {
        0.7
    } else {
        0.5
    }
}

/// Gap between the foreground and background thresholds.
pub const BACKGROUND_MARGIN: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub matched: Option<usize>,
    pub iou: f64,
    /// 1 foreground, 0 background, `None` in the ignore band.
    pub cls: Option<f64>,
    /// Regression target; zero when unmatched.
    pub residual: Residual,
}

/// Matches each proposal to the same-class ground truth of highest 3D IoU.
pub fn assign_targets(proposals: &[Proposal], gt: &[LabeledBox]) -> Vec<Target> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt.iter().enumerate() {
                if g.class_id != p.class_id {
                    continue;
                }
                let iou = iou_3d(&p.bbox, &g.bbox);
                if iou > 0.0 && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            let fg = foreground_threshold(p.class_id);
            let iou = best.map_or(0.0, |(_, v)| v);
            let cls = if iou >= fg {
                Some(1.0)
            } else if iou <= fg - BACKGROUND_MARGIN {
                Some(0.0)
            } else {
                None
            };
            Target {
                matched: best.map(|(j, _)| j),
                iou,
                cls,
                residual: best.map_or([0.0; 7], |(j, _)| encode_residual(&p.bbox, &gt[j].bbox)),
            }
        })
        .collect()
}

/// One line per proposal: `scene cx cy cz l w h yaw interval source`, with
/// interval `-1` for first-stage proposals.
pub fn write_proposal_dump(scene: &str, proposals: &[Candidate]) -> String {
    let mut s = String::new();
    for c in proposals {
        let b = &c.bbox;
        let (interval, source) = match c.source {
            Source::Generated { interval, .. } => (interval as i64, "gen"),
            Source::Rpn => (-1, "rpn"),
        };
        let _ = writeln!(
            s,
            "{scene} {} {} {} {} {} {} {} {interval} {source}",
            b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw
        );
    }
    s
}

/// One dumped proposal line.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpedProposal {
    pub scene: String,
    pub bbox: Box3D,
    pub interval: Option<usize>,
    pub generated: bool,
}

pub fn read_proposal_dump(text: &str) -> Result<Vec<DumpedProposal>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::MalformedFile(format!("proposal dump line {}: {m}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 10 {
            return Err(bad("expected 10 fields"));
        }
        let v: Vec<f64> = f[1..8]
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<_>>()?;
        let interval: i64 = f[8].parse().map_err(|_| bad("bad interval"))?;
        let generated = match f[9] {
            "gen" => true,
            "rpn" => false,
            _ => return Err(bad("source must be gen or rpn")),
        };
        out.push(DumpedProposal {
            scene: f[0].to_string(),
            bbox: Box3D {
                cx: v[0],
                cy: v[1],
                cz: v[2],
                l: v[3],
                w: v[4],
                h: v[5],
                yaw: v[6],
            },
            interval: usize::try_from(interval).ok(),
            generated,
        });
    }
    Ok(out)
}

/// First-stage proposals, one per line: `class cx cy cz l w h yaw score`
/// in the LiDAR frame, class by KITTI name.
pub fn read_rpn_proposals(text: &str) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::MalformedFile(format!("proposal line {}: {m}", n + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 9 {
            return Err(bad("expected 9 fields"));
        }
        let class_id = ObjectClass::parse(f[0]).id().ok_or_else(|| bad("class must be Car, Pedestrian or Cyclist"))?;
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|x| x.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad("bad number")))
            .collect::<Result<_>>()?;
        let bbox = Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6]);
        if !bbox.is_valid() {
            return Err(bad("box sizes must be positive"));
        }
        out.push(Candidate { bbox, class_id, score: v[7], source: Source::Rpn });
    }
    Ok(out)
}

pub fn write_rpn_proposals(proposals: &[Candidate]) -> String {
    let mut s = String::new();
    for c in proposals {
        let b = &c.bbox;
        let class = ObjectClass::from_id(c.class_id).map_or_else(|| c.class_id.to_string(), |o| o.to_string());
        let _ = writeln!(s, "{class} {} {} {} {} {} {} {} {}", b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, c.score);
    }
    s
}
