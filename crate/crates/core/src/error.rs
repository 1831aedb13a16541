use thiserror::Error;

/// Crate-wide error type. Variants map one-to-one onto the failure modes
/// of the public operations.
#[derive(Error, Debug)]
pub enum Error {
    #[error("image {name}: {h}x{w} exceeds the {side}x{side} canvas")]
    DimensionExceedsCanvas {
        name: String,
        h: usize,
        w: usize,
        side: usize,
    },

    #[error("unknown mask color(s): {0}")]
    UnknownColor(String),

    #[error("unknown mask label {label} (palette has {num_classes} classes)")]
    UnknownLabel { label: u8, num_classes: usize },

    #[error("split counts {counts:?} sum to {sum}, dataset has {total} items")]
    CountMismatch {
        counts: [usize; 3],
        sum: usize,
        total: usize,
    },

    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("{what}: {value} not divisible by {by}")]
    NotDivisible {
        what: String,
        value: usize,
        by: usize,
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u8, num_classes: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("non-finite loss at epoch {epoch} (batch {batch}): {value}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },

    #[error("unlabeled pool has {available} images, need {requested}")]
    PoolUnderflow { available: usize, requested: usize },

    #[error("missing ground truth: {0}")]
    MissingGroundTruth(String),

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("png: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png: {0}")]
    PngEncode(#[from] png::EncodingError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape_mismatch(context: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
