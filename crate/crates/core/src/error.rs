use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {what} at voxel {index}")]
    NonFinite { what: String, index: usize },

    #[error("negative dose {value} at voxel {index}")]
    NegativeDose { index: usize, value: f64 },

    #[error("missing mandatory file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("voxel index {index} out of range for {len} voxels in {}", path.display())]
    IndexOutOfRange { path: PathBuf, index: usize, len: usize },

    #[error("duplicate voxel index {index} in {}", path.display())]
    DuplicateIndex { path: PathBuf, index: usize },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("ROI `{0}` is empty after rasterization")]
    EmptyRoi(String),

    #[error("unknown ROI `{0}`")]
    UnknownRoi(String),

    #[error("patient `{0}` has no reference dose")]
    MissingReferenceDose(String),

    #[error("patient `{0}` has no target ROI")]
    NoTarget(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("invalid finite-difference step {0}")]
    InvalidStep(f64),

    #[error("ensemble too small: need at least {needed} members, got {got}")]
    EnsembleTooSmall { needed: usize, got: usize },

    #[error("likelihood underflow: {0}")]
    LikelihoodUnderflow(String),

    #[error("non-finite objective: {0}")]
    NonFiniteObjective(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("no usable observation: {0}")]
    NoObservation(String),

    #[error("metric unavailable: {0}")]
    Metric(String),

    #[error("action `{id}`: {message}")]
    InvalidAction { id: String, message: String },

    #[error("no feasible action; worst constraint margins: {}", format_margins(.0))]
    Infeasible(Vec<(String, String, f64)>),

    #[error("fraction {fraction}: {source}")]
    Fraction {
        fraction: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

fn format_margins(margins: &[(String, String, f64)]) -> String {
    margins
        .iter()
        .map(|(action, constraint, margin)| format!("{action}/{constraint}: {margin:+.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn at_fraction(self, fraction: usize) -> Self {
        Error::Fraction {
            fraction,
            source: Box::new(self),
        }
    }
}
