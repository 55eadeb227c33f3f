//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are skipped. Vectors are written
//! comma-separated. Unknown keys are an error so typos do not pass silently.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::postprocess::{NmsView, DEFAULT_BETA};
use crate::projection::PointRange;
use crate::proposals::GenerationConfig;
use crate::refine::RefineConfig;
use crate::sparse::ImageGrid;
use crate::voxel::{VoxelGridSpec, DEFAULT_MAX_POINTS_PER_VOXEL, DEFAULT_VOXEL_SIZE};

/// Backbone architecture; the weight bundle must match it.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Convolution kernel edge for every sparse kernel.
    pub kernel_size: usize,
    /// Output width of the raw (voxel-camera) branch.
    pub raw_width: usize,
    pub resvc_blocks: usize,
    /// Downsampling factor of the coarse residual path.
    pub rsm_factor: usize,
    /// Image raster cell edge (px) for the voxel-to-image residual.
    pub image_cell_px: f64,
    pub dofe_blocks: usize,
    /// Encoder levels per encoder-decoder block.
    pub dofe_depth: usize,
    pub dofe_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            raw_width: 16,
            resvc_blocks: 2,
            rsm_factor: 2,
            image_cell_px: 4.0,
            dofe_blocks: 1,
            dofe_depth: 2,
            dofe_width: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub range: PointRange,
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
    /// Pixel stride of pseudo-point back-projection.
    pub pseudo_stride: usize,
    /// Image size assumed when a scene has no image.
    pub image_size: (usize, usize),
    pub backbone: BackboneConfig,
    pub refine: RefineConfig,
    pub generation: GenerationConfig,
    /// Generated proposals per scene when mixing.
    pub n_sp: usize,
    /// Proposals refined per scene.
    pub total_rois: usize,
    pub beta: f64,
    pub nms_view: NmsView,
    pub nms_iou: f64,
    pub eval_thresholds: [f64; 3],
    pub distance_edges: Vec<f64>,
    /// Root seed; see [`RunConfig::with_seed`].
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            range: PointRange::KITTI,
            voxel_size: DEFAULT_VOXEL_SIZE,
            max_points_per_voxel: DEFAULT_MAX_POINTS_PER_VOXEL,
            pseudo_stride: 1,
            image_size: (1242, 375),
            backbone: BackboneConfig::default(),
            refine: RefineConfig::default(),
            generation: GenerationConfig::default(),
            n_sp: 100,
            total_rois: 160,
            beta: DEFAULT_BETA,
            nms_view: NmsView::ThreeD,
            nms_iou: NmsView::ThreeD.default_threshold(),
            eval_thresholds: eval.thresholds,
            distance_edges: eval.distance_edges,
            seed: 0,
        }
    }
}

fn parse_scalar<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_scalar(key, x.trim())).collect()
}

fn parse_array<const N: usize, T: FromStr + Copy + Default>(key: &str, v: &str) -> Result<[T; N]> {
    let list = parse_list::<T>(key, v)?;
    list.try_into()
        .map_err(|_| Error::config(format!("`{key}` needs exactly {N} comma-separated values")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key this config understands, in [`RunConfig::to_text`] order.
    pub const KEYS: &'static [&'static str] = &[
        "range_min",
        "range_max",
        "voxel_size",
        "max_points_per_voxel",
        "pseudo_stride",
        "image_size",
        "kernel_size",
        "raw_width",
        "resvc_blocks",
        "rsm_factor",
        "image_cell_px",
        "dofe_blocks",
        "dofe_depth",
        "dofe_width",
        "iterations",
        "samples",
        "grid",
        "channels",
        "radius",
        "window",
        "h_bev",
        "h_cam",
        "bev_scale",
        "per_gt",
        "lower_bounds",
        "sigma_loc",
        "sigma_size",
        "sigma_yaw",
        "shrink_min",
        "max_attempts",
        "n_sp",
        "total_rois",
        "beta",
        "nms_view",
        "nms_iou",
        "eval_thresholds",
        "distance_edges",
        "seed",
    ];

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "range_min" => self.range.min = parse_array(key, v)?,
            "range_max" => self.range.max = parse_array(key, v)?,
            "voxel_size" => self.voxel_size = parse_array(key, v)?,
            "max_points_per_voxel" => self.max_points_per_voxel = parse_scalar(key, v)?,
            "pseudo_stride" => self.pseudo_stride = parse_scalar(key, v)?,
            "image_size" => {
                let [w, h] = parse_array::<2, usize>(key, v)?;
                self.image_size = (w, h);
            }
            "kernel_size" => self.backbone.kernel_size = parse_scalar(key, v)?,
            "raw_width" => self.backbone.raw_width = parse_scalar(key, v)?,
            "resvc_blocks" => self.backbone.resvc_blocks = parse_scalar(key, v)?,
            "rsm_factor" => self.backbone.rsm_factor = parse_scalar(key, v)?,
            "image_cell_px" => self.backbone.image_cell_px = parse_scalar(key, v)?,
            "dofe_blocks" => self.backbone.dofe_blocks = parse_scalar(key, v)?,
            "dofe_depth" => self.backbone.dofe_depth = parse_scalar(key, v)?,
            "dofe_width" => self.backbone.dofe_width = parse_scalar(key, v)?,
            "iterations" => self.refine.iterations = parse_scalar(key, v)?,
            "samples" => self.refine.samples = parse_scalar(key, v)?,
            "grid" => self.refine.grid = parse_scalar(key, v)?,
            "channels" => self.refine.channels = parse_scalar(key, v)?,
            "radius" => self.refine.radius = parse_scalar(key, v)?,
            "window" => self.refine.window = parse_scalar(key, v)?,
            "h_bev" => self.refine.h_bev = parse_scalar(key, v)?,
            "h_cam" => self.refine.h_cam = parse_scalar(key, v)?,
            "bev_scale" => self.refine.bev_scale = parse_scalar(key, v)?,
            "per_gt" => self.generation.per_gt = parse_scalar(key, v)?,
            "lower_bounds" => self.generation.lower_bounds = parse_list(key, v)?,
            "sigma_loc" => self.generation.sigma_loc = parse_scalar(key, v)?,
            "sigma_size" => self.generation.sigma_size = parse_scalar(key, v)?,
            "sigma_yaw" => self.generation.sigma_yaw = parse_scalar(key, v)?,
            "shrink_min" => self.generation.shrink_min = parse_scalar(key, v)?,
            "max_attempts" => self.generation.max_attempts = parse_scalar(key, v)?,
            "n_sp" => self.n_sp = parse_scalar(key, v)?,
            "total_rois" => self.total_rois = parse_scalar(key, v)?,
            "beta" => self.beta = parse_scalar(key, v)?,
            "nms_view" => self.nms_view = v.parse()?,
            "nms_iou" => self.nms_iou = parse_scalar(key, v)?,
            "eval_thresholds" => self.eval_thresholds = parse_array(key, v)?,
            "distance_edges" => self.distance_edges = parse_list(key, v)?,
            "seed" => self.seed = parse_scalar(key, v)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`, then validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("config line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        let seed = cfg.seed;
        let cfg = cfg.with_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let r = &self.refine;
        let g = &self.generation;
        let b = &self.backbone;
        Some(match key {
            "range_min" => join(&self.range.min),
            "range_max" => join(&self.range.max),
            "voxel_size" => join(&self.voxel_size),
            "max_points_per_voxel" => self.max_points_per_voxel.to_string(),
            "pseudo_stride" => self.pseudo_stride.to_string(),
            "image_size" => format!("{},{}", self.image_size.0, self.image_size.1),
            "kernel_size" => b.kernel_size.to_string(),
            "raw_width" => b.raw_width.to_string(),
            "resvc_blocks" => b.resvc_blocks.to_string(),
            "rsm_factor" => b.rsm_factor.to_string(),
            "image_cell_px" => b.image_cell_px.to_string(),
            "dofe_blocks" => b.dofe_blocks.to_string(),
            "dofe_depth" => b.dofe_depth.to_string(),
            "dofe_width" => b.dofe_width.to_string(),
            "iterations" => r.iterations.to_string(),
            "samples" => r.samples.to_string(),
            "grid" => r.grid.to_string(),
            "channels" => r.channels.to_string(),
            "radius" => r.radius.to_string(),
            "window" => r.window.to_string(),
            "h_bev" => r.h_bev.to_string(),
            "h_cam" => r.h_cam.to_string(),
            "bev_scale" => r.bev_scale.to_string(),
            "per_gt" => g.per_gt.to_string(),
            "lower_bounds" => join(&g.lower_bounds),
            "sigma_loc" => g.sigma_loc.to_string(),
            "sigma_size" => g.sigma_size.to_string(),
            "sigma_yaw" => g.sigma_yaw.to_string(),
            "shrink_min" => g.shrink_min.to_string(),
            "max_attempts" => g.max_attempts.to_string(),
            "n_sp" => self.n_sp.to_string(),
            "total_rois" => self.total_rois.to_string(),
            "beta" => self.beta.to_string(),
            "nms_view" => match self.nms_view {
                NmsView::Bev => "bev".into(),
                NmsView::ThreeD => "3d".into(),
            },
            "nms_iou" => self.nms_iou.to_string(),
            "eval_thresholds" => join(&self.eval_thresholds),
            "distance_edges" => join(&self.distance_edges),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Every key, one `key = value` line each; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("listed key")).unwrap();
        }
        s
    }

    /// Sets the root seed and fans it out to the refinement and generation seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.refine.seed = seed;
        self.generation.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        PointRange::new(self.range.min, self.range.max)?;
        self.grid_spec()?;
        if self.max_points_per_voxel == 0 || self.pseudo_stride == 0 {
            return Err(Error::config("max_points_per_voxel and pseudo_stride must be positive"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::config("image size must be positive"));
        }
        let b = &self.backbone;
        if b.kernel_size % 2 == 0 || b.kernel_size == 0 {
            return Err(Error::config("kernel_size must be odd"));
        }
        if b.raw_width == 0 || b.resvc_blocks == 0 || b.rsm_factor == 0 || b.dofe_blocks == 0 || b.dofe_width == 0 {
            return Err(Error::config("backbone widths, block counts and factors must be positive"));
        }
        ImageGrid::new(1, 1, b.image_cell_px)?;
        self.refine.validate()?;
        self.generation.validate()?;
        if self.n_sp > self.total_rois {
            return Err(Error::config("n_sp cannot exceed total_rois"));
        }
        if !(0.0..=1.0).contains(&self.beta) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::config("beta and nms_iou must lie in [0, 1]"));
        }
        self.eval_config().validate()
    }

    pub fn grid_spec(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::covering(&self.range, self.voxel_size)
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            thresholds: self.eval_thresholds,
            distance_edges: self.distance_edges.clone(),
            ..EvalConfig::default()
        }
    }
}
