use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss node must have shape (1,1,1,1), got {0}")]
    NonScalarLoss(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("finite differences hit a non-finite loss while perturbing `{0}`")]
    FiniteDiffNonFinite(String),

    #[error("solver produced a non-finite iterate at iteration {0}")]
    SolverNonFinite(usize),

    #[error("implicit backward diverged: cotangent norm grew for {steps} consecutive steps (last norm {norm:e})")]
    ContractionViolation { steps: usize, norm: f64 },

    #[error("DT4: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("DT4: unsupported dtype code {0}")]
    BadDtype(u8),

    #[error("DT4: truncated payload, expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("DT4: header dims {dims:?} disagree with a {payload_bytes}-byte payload")]
    DimMismatch { dims: [u64; 4], payload_bytes: usize },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
