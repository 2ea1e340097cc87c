use std::path::PathBuf;

use pcrnn::error::ReconError;
use serde_json::{json, Value};

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("png {path}: {message}")]
    Png { path: PathBuf, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("slice ids differ: missing predictions {missing_pred:?}, missing ground truth {missing_gt:?}")]
    IdMismatch {
        missing_pred: Vec<String>,
        missing_gt: Vec<String>,
    },
    #[error("{id}: image shape {pred:?} differs from ground truth {gt:?}")]
    ImageShape {
        id: String,
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("{id}: {image} violates data consistency (relative error {error:e})")]
    DataConsistency { id: String, image: String, error: f64 },
    #[error("zoom window {window:?} (row, col, height, width) exceeds image {height}x{width}")]
    ZoomOutOfBounds {
        window: [usize; 4],
        height: usize,
        width: usize,
    },
    #[error("no images found: {0}")]
    MissingImages(String),
    #[error("checkpoint does not match the configured model: {0}")]
    CheckpointMismatch(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Recon(e) => recon_kind(e),
            CliError::Config(_) => "invalid_config",
            CliError::Io { .. } => "io",
            CliError::Png { .. } => "png",
            CliError::Csv(_) => "csv",
            CliError::Json(_) => "json",
            CliError::IdMismatch { .. } => "id_mismatch",
            CliError::ImageShape { .. } => "shape_mismatch",
            CliError::DataConsistency { .. } => "data_consistency",
            CliError::ZoomOutOfBounds { .. } => "zoom_out_of_bounds",
            CliError::MissingImages(_) => "missing_images",
            CliError::CheckpointMismatch(_) => "checkpoint_mismatch",
        }
    }

    pub fn to_json(&self) -> Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

fn recon_kind(e: &ReconError) -> &'static str {
    match e {
        ReconError::ShapeMismatch { .. } => "shape_mismatch",
        ReconError::NonFinite(_) => "non_finite",
        ReconError::EmptyCoilStack => "empty_coil_stack",
        ReconError::InvalidConfig(_) => "invalid_config",
        ReconError::InfeasibleMask { .. } => "infeasible_mask",
        ReconError::ZeroNorm => "zero_norm",
        ReconError::ImageTooSmall { .. } => "image_too_small",
        ReconError::CropTooLarge { .. } => "crop_too_large",
        ReconError::DegenerateSlice => "degenerate_slice",
        ReconError::Diverged { .. } => "diverged",
        ReconError::NonFiniteLoss { .. } => "non_finite_loss",
        ReconError::NonFiniteGradient(_) => "non_finite_gradient",
        ReconError::CoilMismatch { .. } => "coil_mismatch",
        ReconError::NotMultiCoil(_) => "not_multi_coil",
        ReconError::EmptyDataset => "empty_dataset",
        ReconError::Format(_) => "format",
        ReconError::Missing(_) => "missing",
        ReconError::Hdf5(_) => "hdf5",
        ReconError::Json(_) => "json",
        ReconError::Io(_) => "io",
    }
}
