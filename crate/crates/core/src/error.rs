use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("empty point cloud passed to {0}")]
    EmptyCloud(&'static str),
    #[error("batch norm in train mode needs at least 2 rows per channel, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistent dataset: {0}")]
    Dataset(String),
    #[error("subject generation failed: {0}")]
    Generation(String),
    #[error("no acquisition plane intersects the anatomy")]
    EmptyAcquisition,
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("labels contain a single class: {0}")]
    DegenerateLabels(String),
    #[error("IRLS did not converge after {iterations} iterations (last max update {max_update:e})")]
    Convergence { iterations: usize, max_update: f64 },
    #[error("cannot stratify: {0}")]
    Stratification(String),
    #[error("AUROC undefined: {0}")]
    UndefinedAuroc(&'static str),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
