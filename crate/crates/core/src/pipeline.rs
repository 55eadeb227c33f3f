//! Scene directories in, detections out.
//!
//! A scene directory holds one file per scene id in each of `velodyne/`
//! (`<id>.bin`), `calib/` (`<id>.txt`), `proposals/` (`<id>.txt`) and,
//! optionally, `depth/` (`<id>.bin`) and `image_2/` (`<id>.bin`). Scene ids are
//! the stems of the `velodyne/` files. Without a depth map the pseudo branch
//! runs on an empty cloud.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{
    read_calib, read_depth_map, read_rgb, read_velodyne, write_labels, CalibBundle, DepthMap, LabelRecord,
    ObjectClass, RawScan, RgbImage,
};
use crate::model::Model;
use crate::postprocess::{nms, write_detections, ScoredDetection};
use crate::projection::{build_projection, crop_to_range, depth_to_pseudo_points, PointRecord};
use crate::proposals::{read_rpn_proposals, Candidate};
use crate::refine::{refine, Proposal, RefineInputs};
use crate::sparse::{fuse_bev, resvc_branch, s2d_branch, ImageGrid};
use crate::voxel::{voxelize, Reduce};

pub struct Scene {
    pub id: String,
    pub scan: RawScan,
    pub calib: CalibBundle,
    pub depth: Option<DepthMap>,
    pub rgb: Option<RgbImage>,
    pub rpn: Vec<Candidate>,
}

/// Sizes seen along the way, for logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SceneStats {
    pub raw_points: usize,
    pub pseudo_points: usize,
    pub raw_voxels: usize,
    pub pseudo_voxels: usize,
    pub bev_cells: usize,
    pub proposals: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneOutput {
    pub id: String,
    /// Proposals as refined, before any box moved.
    pub proposals: Vec<Proposal>,
    /// Kept detections in the LiDAR frame, in NMS keep order.
    pub detections: Vec<ScoredDetection>,
    /// The same detections as KITTI result records.
    pub results: Vec<LabelRecord>,
    pub stats: SceneStats,
}

/// Stems of `velodyne/*.bin`, sorted.
pub fn scene_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir.join("velodyne"))? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn optional(path: PathBuf) -> Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(b) => Ok(Some(b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn load_scene(dir: &Path, id: &str) -> Result<Scene> {
    let scan = read_velodyne(&fs::read(dir.join("velodyne").join(format!("{id}.bin")))?)?;
    let calib = read_calib(&fs::read_to_string(dir.join("calib").join(format!("{id}.txt")))?)?;
    let depth = optional(dir.join("depth").join(format!("{id}.bin")))?
        .map(|b| read_depth_map(&b))
        .transpose()?;
    let rgb = optional(dir.join("image_2").join(format!("{id}.bin")))?
        .map(|b| read_rgb(&b))
        .transpose()?;
    let rpn = match optional(dir.join("proposals").join(format!("{id}.txt")))? {
        Some(b) => read_rpn_proposals(&String::from_utf8_lossy(&b))?,
        None => Vec::new(),
    };
    Ok(Scene { id: id.to_string(), scan, calib, depth, rgb, rpn })
}

/// LiDAR points as raw records (image coordinates and color stay zero).
pub fn raw_point_records(scan: &RawScan) -> Vec<PointRecord> {
    scan.points.iter().map(|p| PointRecord::raw(p.x as f64, p.y as f64, p.z as f64)).collect()
}

fn image_size(scene: &Scene, cfg: &RunConfig) -> (usize, usize) {
    scene
        .rgb
        .as_ref()
        .map(|i| (i.width, i.height))
        .or(scene.depth.as_ref().map(|d| (d.width, d.height)))
        .unwrap_or(cfg.image_size)
}

/// First-stage proposals by descending score (ties to file order), at most `total_rois`.
pub fn select_proposals(rpn: &[Candidate], total: usize) -> Vec<Proposal> {
    let mut order: Vec<usize> = (0..rpn.len()).collect();
    order.sort_by(|&a, &b| rpn[b].score.total_cmp(&rpn[a].score).then(a.cmp(&b)));
    order.into_iter().take(total).map(|i| rpn[i].proposal()).collect()
}

/// Projection, voxelization, both branches, fusion, `T` refinement
/// iterations and balanced NMS. Errors carry the failing stage.
///
/// A scene with no LiDAR points or no proposals yields no detections.
pub fn run_scene(scene: &Scene, model: &Model, cfg: &RunConfig) -> Result<SceneOutput> {
    let mut stats = SceneStats::default();
    let empty = |stats| SceneOutput {
        id: scene.id.clone(),
        proposals: Vec::new(),
        detections: Vec::new(),
        results: Vec::new(),
        stats,
    };
    let proj = build_projection(&scene.calib).map_err(|e| e.in_stage("projection"))?;
    let size = image_size(scene, cfg);

    let (raw_pts, pseudo_pts) = (|| -> Result<_> {
        let raw = crop_to_range(&raw_point_records(&scene.scan), &cfg.range)?;
        let pseudo = match &scene.depth {
            Some(d) => {
                let rgb = match &scene.rgb {
                    Some(i) => i.clone(),
                    None => RgbImage::filled(d.width, d.height, [0, 0, 0]),
                };
                crop_to_range(&depth_to_pseudo_points(&proj, d, &rgb, cfg.pseudo_stride)?, &cfg.range)?
            }
            None => Vec::new(),
        };
        Ok((raw, pseudo))
    })()
    .map_err(|e| e.in_stage("projection"))?;
    stats.raw_points = raw_pts.len();
    stats.pseudo_points = pseudo_pts.len();

    let proposals = select_proposals(&scene.rpn, cfg.total_rois);
    stats.proposals = proposals.len();
    if raw_pts.is_empty() || proposals.is_empty() {
        return Ok(empty(stats));
    }

    let (raw_v, pseudo_v) = (|| -> Result<_> {
        let spec = cfg.grid_spec()?;
        Ok((
            voxelize(&raw_pts, &spec, cfg.max_points_per_voxel, Reduce::Mean)?,
            voxelize(&pseudo_pts, &spec, cfg.max_points_per_voxel, Reduce::Mean)?,
        ))
    })()
    .map_err(|e| e.in_stage("voxelize"))?;
    stats.raw_voxels = raw_v.len();
    stats.pseudo_voxels = pseudo_v.len();

    let grid = ImageGrid::new(size.0, size.1, cfg.backbone.image_cell_px).map_err(|e| e.in_stage("resvc"))?;
    let raw_f = resvc_branch(&raw_v, &model.resvc, &proj, &grid).map_err(|e| e.in_stage("resvc"))?;
    let pseudo_f = s2d_branch(&pseudo_v, &model.s2d).map_err(|e| e.in_stage("s2d"))?;
    stats.bev_cells = fuse_bev(&raw_f, &pseudo_f).map_err(|e| e.in_stage("fuse"))?.len();

    let (state, outputs) = (|| -> Result<_> {
        let inputs = RefineInputs::new(&raw_f, &pseudo_f, &raw_pts, &pseudo_pts, cfg.refine.radius)?;
        refine(proposals.clone(), &inputs, &model.refine, &cfg.refine)
    })()
    .map_err(|e| e.in_stage("refine"))?;

    let last = outputs.last().expect("at least one iteration");
    let scored: Vec<ScoredDetection> = (|| -> Result<_> {
        state
            .proposals
            .iter()
            .enumerate()
            .map(|(i, p)| ScoredDetection::new(p.bbox, p.class_id, last.combined.cls[i], last.combined.iou[i], cfg.beta))
            .collect()
    })()
    .map_err(|e| e.in_stage("nms"))?;
    let kept = nms(&scored, cfg.nms_iou, cfg.nms_view);
    let detections: Vec<ScoredDetection> = kept.into_iter().map(|i| scored[i].clone()).collect();
    let results = detections
        .iter()
        .map(|d| {
            let class = ObjectClass::from_id(d.class_id).unwrap_or(ObjectClass::Other(d.class_id.to_string()));
            proj.lidar_to_label(&d.bbox, class, Some(d.confidence), size)
        })
        .collect();
    Ok(SceneOutput { id: scene.id.clone(), proposals, detections, results, stats })
}

/// Writes through a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::config(format!("`{}` is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Where [`run_pipeline`] puts a scene's outputs: KITTI results at
/// `<out>/<id>.txt`, LiDAR-frame detection lists at `<out>/lidar/<id>.txt`.
pub fn output_paths(out: &Path, id: &str) -> (PathBuf, PathBuf) {
    (out.join(format!("{id}.txt")), out.join("lidar").join(format!("{id}.txt")))
}

/// Runs every scene of `dir` on a pool of `jobs` threads and writes each
/// scene's outputs atomically as soon as it finishes. The returned outputs
/// follow scene id order.
pub fn run_pipeline(dir: &Path, model: &Model, cfg: &RunConfig, out: &Path, jobs: usize) -> Result<Vec<SceneOutput>> {
    cfg.validate()?;
    model.check(cfg)?;
    let ids = scene_ids(dir).map_err(|e| e.in_stage("load"))?;
    fs::create_dir_all(out.join("lidar"))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| {
        ids.par_iter()
            .map(|id| {
                let run = || -> Result<SceneOutput> {
                    let scene = load_scene(dir, id).map_err(|e| e.in_stage("load"))?;
                    let o = run_scene(&scene, model, cfg)?;
                    let (res, lidar) = output_paths(out, id);
                    write_atomic(&res, write_labels(&o.results).as_bytes()).map_err(|e| e.in_stage("write"))?;
                    write_atomic(&lidar, write_detections(&o.detections).as_bytes()).map_err(|e| e.in_stage("write"))?;
                    Ok(o)
                };
                run().map_err(|e| e.in_scene(id))
            })
            .collect()
    })
}
