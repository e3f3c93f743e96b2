use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("degenerate cloud: diameter is zero")]
    DegenerateCloud,
    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),
    #[error("rank deficient point configuration")]
    RankDeficient,
    #[error("normals required")]
    NormalsRequired,
    #[error("apex at infinity")]
    ApexAtInfinity,
    #[error("degenerate axis: normals do not constrain a cylinder axis")]
    DegenerateAxis,
    #[error("too few points: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("length mismatch: expected {expected} rows, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("{}: line {line}: {msg}", path.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()))]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        msg: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate gap: eigengap is not positive")]
    DegenerateGap,
    #[error("eigensolver stalled: achieved residual {residual:.3e}")]
    EigensolverStalled { residual: f64 },
    #[error("cloud has {n} points, above the dense cap {cap}; subsample the cloud first")]
    DenseCapExceeded { n: usize, cap: usize },
    #[error("insufficient samples for finite-difference fit")]
    InsufficientSamples,
    #[error("objective evaluation failed: {0}")]
    Objective(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: None,
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn with_path(self, p: impl Into<PathBuf>) -> Self {
        match self {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: Some(p.into()),
                line,
                msg,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
