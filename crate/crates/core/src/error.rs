use thiserror::Error;

pub type Result<T> = std::result::Result<T, ReconError>;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("coil stack is empty")]
    EmptyCoilStack,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("infeasible mask: {center} center columns exceed the budget of {budget:.2} columns")]
    InfeasibleMask { center: usize, budget: f64 },

    #[error("volume norm must be positive")]
    ZeroNorm,

    #[error("image of size {height}x{width} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("crop {crop_h}x{crop_w} does not fit in image {height}x{width}")]
    CropTooLarge {
        crop_h: usize,
        crop_w: usize,
        height: usize,
        width: usize,
    },

    #[error("degenerate slice: zero-filled image has zero mean magnitude")]
    DegenerateSlice,

    #[error("solver diverged at iteration {iteration}: objective {objective:e}")]
    Diverged { iteration: usize, objective: f64 },

    #[error("non-finite loss at step {step}; parameters restored to the last good state")]
    NonFiniteLoss { step: usize },

    #[error("non-finite gradient for tensor {0}")]
    NonFiniteGradient(String),

    #[error("coil count mismatch: model expects {expected}, input has {found}")]
    CoilMismatch { expected: usize, found: usize },

    #[error("{0} is only available for multi-coil data")]
    NotMultiCoil(&'static str),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("archive format error: {0}")]
    Format(String),

    #[error("missing dataset or tensor `{0}`")]
    Missing(String),

    #[error("hdf5: {0}")]
    Hdf5(#[from] hdf5::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ReconError {
    pub(crate) fn shape(context: &'static str, expected: &[usize], found: &[usize]) -> Self {
        ReconError::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
