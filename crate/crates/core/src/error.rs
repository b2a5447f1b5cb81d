use std::path::PathBuf;

/// Errors raised anywhere in the training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum CastError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("tensor #{0} is not part of the differentiated graph")]
    NotInGraph(u64),

    #[error("gradient requires a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("saliency mask is empty but phi = {phi} requires salient overlap")]
    DegenerateMask { phi: f32 },

    #[error("crop (top {top}, left {left}, {h}x{w}) lies outside the {height}x{width} source")]
    CropOutOfBounds {
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        height: usize,
        width: usize,
    },

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("scene pool has no sample of class {0}")]
    MissingClass(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CastError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CastError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CastError::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CastError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CastError>;
