use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two operands (or an operand and a configuration) disagree.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// An argument lies outside the domain of the operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// FFT length is not a power of two.
    #[error("fft length {0} is not a power of two")]
    Length(usize),

    /// A forward operation produced NaN or infinity.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// The linear system in the bilinear transform is singular.
    #[error("singular system matrix (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    /// Misuse of the autodiff tape (e.g. backward from a non-scalar).
    #[error("tape contract violated: {0}")]
    Contract(String),

    /// A metric is undefined on the given mask (empty evaluation set, zero target mass).
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    /// Invalid run or model configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training diverged.
    #[error("non-finite loss at iteration {iteration} (lr {lr:e}, last finite loss {last_loss:e})")]
    NumericFailure {
        iteration: usize,
        lr: f64,
        last_loss: f64,
    },

    /// Malformed file contents.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
