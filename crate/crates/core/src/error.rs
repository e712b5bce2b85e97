use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty matrix ({rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("hessian is not symmetric (asymmetry {asymmetry:.3e}, norm {norm:.3e})")]
    AsymmetricHessian { asymmetry: f64, norm: f64 },

    #[error(
        "singular KKT system of size {size}: pivot ratio {pivot_ratio:.3e}, \
         condition estimate {condition_estimate:.3e}"
    )]
    SingularKkt {
        size: usize,
        pivot_ratio: f64,
        condition_estimate: f64,
    },

    #[error("inconsistent constraint: row {row} vanishes but its right-hand side is {rhs:.3e}")]
    InconsistentConstraint { row: usize, rhs: f64 },

    #[error("KKT residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    InaccurateSolve { residual: f64, tolerance: f64 },

    #[error("trajectory needs at least {required} frames, has {actual}")]
    TooFewFrames { required: usize, actual: usize },

    #[error("full-space operator fit limited to n <= {limit}, got n = {n}; use the reduced fit")]
    FullFitTooLarge { n: usize, limit: usize },

    #[error("degenerate rank: {0}")]
    DegenerateRank(String),

    #[error("region is empty")]
    EmptyRegion,

    #[error("local basis column is invisible to the reduced basis (projection norm {norm:.3e})")]
    DegenerateProjection { norm: f64 },

    #[error("unknown field block `{0}`")]
    UnknownBlock(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("payload truncated: expected {expected} bytes, found {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    #[error("dimension mismatch: header declares n = {declared}, payload holds {actual} values per frame")]
    DimensionMismatch { declared: usize, actual: usize },

    #[error("simulation failure: {0}")]
    Simulation(String),

    #[error("stale model: session expects {expected:#018x}, found {actual:#018x}")]
    StaleModel { expected: u64, actual: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
