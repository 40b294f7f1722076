use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal residual {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("non-finite value in {location}")]
    NonFinite { location: String },

    #[error("pair {pair}: upstream matrix has zero Frobenius norm, normalization undefined")]
    ZeroUpstream { pair: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("bad IDX magic in {file}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        file: String,
        expected: u32,
        found: u32,
    },

    #[error("IDX file {file} truncated at byte offset {offset} (needed {needed} bytes)")]
    IdxTruncated {
        file: String,
        offset: usize,
        needed: usize,
    },

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("checkpoint manifest: {0}")]
    Manifest(String),

    #[error("calibration produced no samples at observation point {0}")]
    EmptyCalibration(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}
