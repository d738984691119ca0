use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),
    #[error("space mismatch: expected {expected} genotype, got {found}")]
    SpaceMismatch { expected: String, found: String },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("stem channel split: imagenet3 stem needs an even channel count, got {0}")]
    StemChannelSplit(usize),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("search aborted at epoch {epoch}, branch {branch}: non-finite loss")]
    SearchDiverged { epoch: usize, branch: usize },
    #[error("degenerate calibration points: {0}")]
    DegeneratePoints(String),
    #[error("calibration produced a non-positive per-ReLU slope ({0} ms/ReLU)")]
    NonPositiveSlope(f64),
    #[error("calibration produced a negative intercept ({0} ms)")]
    NegativeIntercept(f64),
    #[error("fixed-point overflow at layer {layer}: {detail}")]
    Overflow { layer: usize, detail: String },
    #[error("dimension mismatch at layer {layer}: {detail}")]
    DimensionMismatch { layer: usize, detail: String },
    #[error("insufficient trials: {got} transcripts, need at least {need}")]
    InsufficientTrials { got: usize, need: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("malformed wire data: {0}")]
    Wire(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI's JSON error records.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidGenotype(_) => "invalid_genotype",
            Error::SpaceMismatch { .. } => "space_mismatch",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::StemChannelSplit(_) => "stem_channel_split",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::SearchDiverged { .. } => "search_diverged",
            Error::DegeneratePoints(_) => "degenerate_points",
            Error::NonPositiveSlope(_) => "non_positive_slope",
            Error::NegativeIntercept(_) => "negative_intercept",
            Error::Overflow { .. } => "overflow",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InsufficientTrials { .. } => "insufficient_trials",
            Error::Protocol(_) => "protocol",
            Error::Wire(_) => "wire",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
