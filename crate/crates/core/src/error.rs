use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("calibration parse error: {0}")]
    CalibParse(String),

    #[error("label parse error on line {line}: {message}")]
    LabelParse { line: usize, message: String },

    #[error("degenerate calibration: {0}")]
    DegenerateCalib(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("layout overflow: local coordinate {local} outside [0, {height}) for proposal {proposal}")]
    LayoutOverflow {
        proposal: usize,
        local: i64,
        height: i64,
    },

    #[error("proposal generation shortfall for ground truth {gt_index}: interval [{lower}, {upper}) holds {filled} of {quota} after {attempts} attempts")]
    GenerationShortfall {
        gt_index: usize,
        interval: usize,
        lower: f64,
        upper: f64,
        filled: usize,
        quota: usize,
        attempts: usize,
    },

    #[error("scene has no proposals from any source")]
    EmptyScene,

    #[error("weight bundle: {0}")]
    Weights(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("scene `{scene}`: {source}")]
    Scene {
        scene: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn in_scene(self, scene: &str) -> Self {
        Error::Scene {
            scene: scene.to_string(),
            source: Box::new(self),
        }
    }
}
