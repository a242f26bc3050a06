use std::path::PathBuf;

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// Failures of the file formats in this crate.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated at byte offset {offset}: needed {needed} more bytes for {what}")]
    Truncated { offset: usize, needed: usize, what: String },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },
    #[error("malformed data at byte offset {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("tensor {index}: name `{found}` where the model has `{expected}`")]
    Name { index: usize, expected: String, found: String },
    #[error("tensor `{name}`: shape {found:?} where the model has {expected:?}")]
    Shape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("tensor `{name}`: dtype code {code} cannot be loaded as {expected}")]
    DType { name: String, code: u8, expected: &'static str },
    #[error("file holds {found} tensors, the model has {expected}")]
    Count { expected: usize, found: usize },
    #[error("config mismatch: field `{field}` differs from the expected config")]
    ConfigMismatch { field: &'static str },
    #[error("config line {line}: {detail}")]
    Config { line: usize, detail: String },
    #[error(transparent)]
    Core(#[from] convmlp_core::Error),
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io { path: path.into(), source }
    }

    pub(crate) fn malformed(offset: usize, detail: impl Into<String>) -> Self {
        FormatError::Malformed { offset, detail: detail.into() }
    }
}
