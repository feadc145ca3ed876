use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // volume io
    #[error("bad NIfTI magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("bad NIfTI header: {0}")]
    BadHeader(String),
    #[error("truncated payload: need {needed} bytes, found {found}")]
    TruncatedData { needed: usize, found: usize },
    #[error("non-finite value at voxel {0}")]
    NonFinite(usize),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("phantom size {0:?} too small, every side must be >= 16")]
    SizeTooSmall([usize; 3]),

    // slices and augmentation
    #[error("argument must be positive: {0}")]
    NonPositiveArgument(&'static str),
    #[error("subject {0} has no modality volumes")]
    NoModalities(String),
    #[error("slice index {index} out of range for depth {depth}")]
    IndexOutOfRange { index: usize, depth: usize },
    #[error("slice side {side} smaller than required {required}")]
    SliceTooSmall { side: usize, required: usize },

    // autodiff and model
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient produced by op `{op}` (node {node})")]
    NaNGradient { op: &'static str, node: usize },
    #[error("input side {side} not divisible by patch size {patch}")]
    IndivisibleInput { side: usize, patch: usize },
    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("gradient check failed: max relative error {max_rel_error:e} >= {tolerance:e}")]
    GradCheckFailed { max_rel_error: f64, tolerance: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    // distillation
    #[error("view count mismatch: {0}")]
    MismatchedViewCounts(String),
    #[error("empty batch")]
    EmptyBatch,

    // downstream and evaluation
    #[error("leakage detected: {0}")]
    LeakageDetected(String),
    #[error("training labels are degenerate: {0}")]
    DegenerateLabels(String),
    #[error("no slices sampled for subject {0}")]
    NoSlices(String),
    #[error("too few subjects: {0}")]
    TooFewSubjects(String),
    #[error("auroc needs both classes present")]
    SingleClass,
    #[error("hd95 undefined: {0} mask is empty")]
    EmptyMask(&'static str),
    #[error("class {class} has no subjects at fraction {fraction}")]
    EmptyClassAtFraction { class: usize, fraction: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the leakage / protocol invariants. The CLI maps
    /// these to a distinct exit code.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::LeakageDetected(_) | Error::NaNGradient { .. } | Error::NonFinite(_) | Error::GradCheckFailed { .. }
        )
    }
}
