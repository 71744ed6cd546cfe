use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library. Variants map onto the CLI exit-code classes
/// (usage, data, numeric).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: expected {expected:?}, got {actual:?}")]
    Dimension {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("non-finite gradient in layer {layer} ({tensor}) at index {index}")]
    NonFiniteGradient {
        layer: usize,
        tensor: &'static str,
        index: usize,
    },

    #[error("integration blow-up: neuron {neuron} of layer {layer} at t = {time_ms} ms")]
    IntegrationBlowup {
        layer: usize,
        neuron: usize,
        time_ms: f64,
    },

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("unsupported model format version {found} (this build reads version {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed or missing input data.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Load(_) | Error::Io { .. } | Error::ModelFormat(_) | Error::VersionMismatch { .. })
    }

    /// True for numerical failures (non-finite gradients, integrator blow-up).
    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::NonFiniteGradient { .. } | Error::IntegrationBlowup { .. })
    }
}

/// Dataset decoding failures. Every variant names the offending file.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{file}: bad magic number {found} at offset 0 (expected {expected})")]
    BadMagic {
        file: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{file}: truncated at offset {offset} (needed {needed} more bytes)")]
    Truncated {
        file: PathBuf,
        offset: usize,
        needed: usize,
    },

    #[error("{images}: {image_count} images but {labels}: {label_count} labels")]
    CountMismatch {
        images: PathBuf,
        image_count: usize,
        labels: PathBuf,
        label_count: usize,
    },

    #[error("{file}: size {size} bytes is not a multiple of the {record}-byte record size")]
    RecordSize {
        file: PathBuf,
        size: usize,
        record: usize,
    },

    #[error("{file}: record {record} at offset {offset} has label {label} (> 9)")]
    CorruptRecord {
        file: PathBuf,
        record: usize,
        offset: usize,
        label: u8,
    },

    #[error("{file}: unexpected image geometry {dims:?} at offset {offset}")]
    Geometry {
        file: PathBuf,
        offset: usize,
        dims: Vec<usize>,
    },
}
