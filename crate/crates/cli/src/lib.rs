//! Subcommands of the `cmfiou` binary. Each `cmd_*` function is one
//! subcommand; [`run`] dispatches parsed arguments to them.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cmfiou::config::RunConfig;
use cmfiou::eval::{evaluate, rows_to_csv, EvalRow, EvalScene};
use cmfiou::io::{
    read_calib, read_depth_map, read_labels, read_points, read_rgb, read_velodyne, write_points,
    write_sparse_tensor, RgbImage,
};
use cmfiou::model::Model;
use cmfiou::pipeline::{raw_point_records, run_pipeline, run_scene, write_atomic, SceneOutput};
use cmfiou::postprocess::{nms, read_detections, write_detections, NmsView};
use cmfiou::projection::{build_projection, crop_to_range, depth_to_pseudo_points, PointRecord};
use cmfiou::proposals::{generate_uniform_proposals, mix_with_rpn, read_rpn_proposals, write_proposal_dump, LabeledBox};
use cmfiou::synthetic::{synthetic_scene, write_scene, SyntheticConfig};
use cmfiou::voxel::{voxelize, Reduce};
use cmfiou::weights::WeightBundle;

#[derive(Debug, Parser)]
#[command(name = "cmfiou", version, about = "Multi-modal 3D detection refinement core")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand that reads a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` run configuration; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed, fanned out to every random stage.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::parse(&read_text(p)?).with_context(|| format!("config `{}`", p.display()))?,
            None => RunConfig::default(),
        };
        let cfg = match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Confidence and suppression overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct NmsArgs {
    /// Weight of the IoU score in the balanced confidence, in [0, 1].
    #[arg(long)]
    pub beta: Option<f64>,
    /// Suppression threshold; the view's default when absent.
    #[arg(long)]
    pub nms_iou: Option<f64>,
    /// Overlap used for suppression: `3d` or `bev`.
    #[arg(long)]
    pub view: Option<NmsView>,
}

impl NmsArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(b) = self.beta {
            cfg.beta = b;
        }
        if let Some(v) = self.view {
            cfg.nms_view = v;
            cfg.nms_iou = v.default_threshold();
        }
        if let Some(t) = self.nms_iou {
            cfg.nms_iou = t;
        }
        cfg.validate()?;
        Ok(())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Back-project a depth map into a pseudo-point dump.
    Pseudo {
        #[arg(long)]
        depth: PathBuf,
        /// Color image; points are black without one.
        #[arg(long)]
        rgb: Option<PathBuf>,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pixel stride; the config value when absent.
        #[arg(long)]
        stride: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Crop and voxelize a point dump or a velodyne scan into a sparse tensor dump.
    Voxelize {
        /// Point dump as written by `pseudo`.
        #[arg(long, conflicts_with = "velodyne", required_unless_present = "velodyne")]
        points: Option<PathBuf>,
        /// Raw velodyne scan.
        #[arg(long)]
        velodyne: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every scene of a scene directory end to end.
    Pipeline {
        #[arg(long)]
        scenes: PathBuf,
        /// Weight bundle; a model seeded from the run seed when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Scenes processed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        nms: NmsArgs,
    },
    /// Sample training proposals around labeled objects.
    GenProposals {
        /// KITTI label file of the scene.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Refinement iteration (1-based) selecting the IoU schedule.
        #[arg(long, default_value_t = 1)]
        iteration: usize,
        /// First-stage proposals to mix in.
        #[arg(long)]
        rpn: Option<PathBuf>,
        /// Scene id written in the dump; the label file stem when absent.
        #[arg(long)]
        scene: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rescore and suppress a detection list.
    Nms {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        nms: NmsArgs,
    },
    /// AP summary of a results directory against a label directory.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Time the pipeline on generated scenes.
    Bench {
        #[arg(long, default_value_t = 3)]
        scenes: usize,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write generated scenes in the scene-directory layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        scenes: usize,
        /// Also write the seeded weight bundle here.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn read_bytes(p: &Path) -> Result<Vec<u8>> {
    fs::read(p).with_context(|| format!("cannot read `{}`", p.display()))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("cannot read `{}`", p.display()))
}

fn write_out(p: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(p, bytes).with_context(|| format!("cannot write `{}`", p.display()))
}

/// The weight bundle at `path`, or the model seeded from the run seed.
pub fn load_model(path: Option<&Path>, cfg: &RunConfig) -> Result<Model> {
    match path {
        Some(p) => {
            let wb = WeightBundle::from_bytes(&read_bytes(p)?).with_context(|| format!("weights `{}`", p.display()))?;
            Ok(Model::from_bundle(&wb, cfg).with_context(|| format!("weights `{}`", p.display()))?)
        }
        None => Ok(Model::seeded(cfg, cfg.seed)),
    }
}

/// Writes the pseudo points of one depth map; returns how many.
pub fn cmd_pseudo(depth: &Path, rgb: Option<&Path>, calib: &Path, out: &Path, stride: Option<usize>, cfg: &RunConfig) -> Result<usize> {
    let proj = build_projection(&read_calib(&read_text(calib)?)?)?;
    let d = read_depth_map(&read_bytes(depth)?)?;
    let img = match rgb {
        Some(p) => read_rgb(&read_bytes(p)?)?,
        None => RgbImage::filled(d.width, d.height, [0, 0, 0]),
    };
    let pts = depth_to_pseudo_points(&proj, &d, &img, stride.unwrap_or(cfg.pseudo_stride))?;
    write_out(out, &write_points(&pts))?;
    log::info!("{} pseudo points -> {}", pts.len(), out.display());
    Ok(pts.len())
}

/// Writes the voxelized cloud; returns the number of occupied voxels.
pub fn cmd_voxelize(points: Option<&Path>, velodyne: Option<&Path>, out: &Path, cfg: &RunConfig) -> Result<usize> {
    let pts: Vec<PointRecord> = match (points, velodyne) {
        (Some(p), _) => read_points(&read_bytes(p)?)?,
        (None, Some(v)) => raw_point_records(&read_velodyne(&read_bytes(v)?)?),
        (None, None) => bail!("one of --points or --velodyne is required"),
    };
    let cropped = crop_to_range(&pts, &cfg.range)?;
    let t = voxelize(&cropped, &cfg.grid_spec()?, cfg.max_points_per_voxel, Reduce::Mean)?;
    write_out(out, &write_sparse_tensor(&t))?;
    log::info!("{} of {} points in range, {} voxels -> {}", cropped.len(), pts.len(), t.len(), out.display());
    Ok(t.len())
}

pub fn cmd_pipeline(scenes: &Path, weights: Option<&Path>, out: &Path, jobs: usize, cfg: &RunConfig) -> Result<Vec<SceneOutput>> {
    let model = load_model(weights, cfg)?;
    let t0 = Instant::now();
    let outputs = run_pipeline(scenes, &model, cfg, out, jobs)?;
    for o in &outputs {
        log::info!(
            "scene {}: {} raw / {} pseudo points, {} proposals, {} detections",
            o.id,
            o.stats.raw_points,
            o.stats.pseudo_points,
            o.stats.proposals,
            o.detections.len()
        );
    }
    log::info!("{} scenes in {:.2?}", outputs.len(), t0.elapsed());
    Ok(outputs)
}

/// Writes the proposal dump; returns the number of proposals.
pub fn cmd_gen_proposals(
    labels: &Path,
    calib: &Path,
    iteration: usize,
    rpn: Option<&Path>,
    scene: Option<&str>,
    out: &Path,
    cfg: &RunConfig,
) -> Result<usize> {
    let proj = build_projection(&read_calib(&read_text(calib)?)?)?;
    let gts: Vec<LabeledBox> = read_labels(&read_text(labels)?)?
        .iter()
        .filter_map(|l| l.class.id().map(|class_id| LabeledBox { bbox: proj.label_to_lidar(l), class_id }))
        .collect();
    let generated = generate_uniform_proposals(&gts, &cfg.generation, iteration)?;
    let proposals = match rpn {
        Some(p) => {
            let first = read_rpn_proposals(&read_text(p)?)?;
            mix_with_rpn(&generated, &first, cfg.n_sp, cfg.total_rois, cfg.generation.seed ^ iteration as u64)?
        }
        None => generated,
    };
    let id = match scene {
        Some(s) => s.to_string(),
        None => labels.file_stem().map_or_else(|| "scene".to_string(), |s| s.to_string_lossy().into_owned()),
    };
    write_out(out, write_proposal_dump(&id, &proposals).as_bytes())?;
    log::info!("{} proposals around {} objects -> {}", proposals.len(), gts.len(), out.display());
    Ok(proposals.len())
}

/// Writes the kept detections in keep order; returns how many were kept.
pub fn cmd_nms(input: &Path, out: &Path, cfg: &RunConfig) -> Result<usize> {
    let dets = read_detections(&read_text(input)?, cfg.beta)?;
    let kept: Vec<_> = nms(&dets, cfg.nms_iou, cfg.nms_view).into_iter().map(|i| dets[i].clone()).collect();
    write_out(out, write_detections(&kept).as_bytes())?;
    log::info!("kept {} of {} detections -> {}", kept.len(), dets.len(), out.display());
    Ok(kept.len())
}

fn txt_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let mut ids = BTreeSet::new();
    for e in fs::read_dir(dir).with_context(|| format!("cannot list `{}`", dir.display()))? {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == "txt") {
            if let Some(s) = p.file_stem() {
                ids.insert(s.to_string_lossy().into_owned());
            }
        }
    }
    Ok(ids)
}

/// Evaluates matching ids of two directories of KITTI label files.
pub fn cmd_eval(results: &Path, labels: &Path, out: Option<&Path>, cfg: &RunConfig) -> Result<(Vec<EvalRow>, String)> {
    let (r, l) = (txt_ids(results)?, txt_ids(labels)?);
    if r != l {
        let only_r: Vec<_> = r.difference(&l).cloned().collect();
        let only_l: Vec<_> = l.difference(&r).cloned().collect();
        bail!(
            "scene ids differ: only in results [{}], only in labels [{}]",
            only_r.join(", "),
            only_l.join(", ")
        );
    }
    let mut loaded = Vec::new();
    for id in &r {
        let f = format!("{id}.txt");
        let dets = read_labels(&read_text(&results.join(&f))?).with_context(|| format!("results for `{id}`"))?;
        let gts = read_labels(&read_text(&labels.join(&f))?).with_context(|| format!("labels for `{id}`"))?;
        loaded.push((dets, gts));
    }
    let scenes: Vec<EvalScene> = loaded.iter().map(|(d, g)| EvalScene { dets: d, gts: g }).collect();
    let ecfg = cfg.eval_config();
    let rows = evaluate(&scenes, &ecfg)?;
    let csv = rows_to_csv(&rows, &ecfg);
    if let Some(p) = out {
        write_out(p, csv.as_bytes())?;
    }
    Ok((rows, csv))
}

/// Per-scene wall times of the full pipeline on generated scenes.
pub fn cmd_bench(scenes: usize, weights: Option<&Path>, cfg: &RunConfig) -> Result<String> {
    let model = load_model(weights, cfg)?;
    let mut report = String::from("scene,raw_points,pseudo_points,proposals,detections,generate_ms,run_ms\n");
    let mut total = 0.0;
    for i in 0..scenes {
        let t0 = Instant::now();
        let s = synthetic_scene(&format!("{i:06}"), cfg.seed.wrapping_add(i as u64), &SyntheticConfig::default())?;
        let gen_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let o = run_scene(&s.to_scene(), &model, cfg)?;
        let run_ms = t1.elapsed().as_secs_f64() * 1e3;
        total += run_ms;
        report.push_str(&format!(
            "{},{},{},{},{},{gen_ms:.1},{run_ms:.1}\n",
            o.id,
            o.stats.raw_points,
            o.stats.pseudo_points,
            o.stats.proposals,
            o.detections.len()
        ));
    }
    if scenes > 0 {
        report.push_str(&format!("mean,,,,,,{:.1}\n", total / scenes as f64));
    }
    Ok(report)
}

pub fn cmd_synth(out: &Path, scenes: usize, weights: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    for i in 0..scenes {
        let s = synthetic_scene(&format!("{i:06}"), cfg.seed.wrapping_add(i as u64), &SyntheticConfig::default())?;
        write_scene(out, &s)?;
    }
    if let Some(p) = weights {
        write_out(p, &Model::seeded(cfg, cfg.seed).to_bundle()?.to_bytes())?;
    }
    log::info!("{scenes} scenes -> {}", out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pseudo { depth, rgb, calib, out, stride, cfg } => {
            cmd_pseudo(&depth, rgb.as_deref(), &calib, &out, stride, &cfg.load()?)?;
        }
        Command::Voxelize { points, velodyne, out, cfg } => {
            cmd_voxelize(points.as_deref(), velodyne.as_deref(), &out, &cfg.load()?)?;
        }
        Command::Pipeline { scenes, weights, out, jobs, cfg, nms } => {
            let mut c = cfg.load()?;
            nms.apply(&mut c)?;
            cmd_pipeline(&scenes, weights.as_deref(), &out, jobs, &c)?;
        }
        Command::GenProposals { labels, calib, iteration, rpn, scene, out, cfg } => {
            cmd_gen_proposals(&labels, &calib, iteration, rpn.as_deref(), scene.as_deref(), &out, &cfg.load()?)?;
        }
        Command::Nms { input, out, cfg, nms } => {
            let mut c = cfg.load()?;
            nms.apply(&mut c)?;
            cmd_nms(&input, &out, &c)?;
        }
        Command::Eval { results, labels, out, cfg } => {
            let (_, csv) = cmd_eval(&results, &labels, out.as_deref(), &cfg.load()?)?;
            if out.is_none() {
                print!("{csv}");
            }
        }
        Command::Bench { scenes, weights, cfg } => print!("{}", cmd_bench(scenes, weights.as_deref(), &cfg.load()?)?),
        Command::Synth { out, scenes, weights, cfg } => cmd_synth(&out, scenes, weights.as_deref(), &cfg.load()?)?,
    }
    Ok(())
}
