use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: invalid geometry: {detail}")]
    Geometry { op: &'static str, detail: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("{op}: degenerate statistics: {detail}")]
    DegenerateStatistics { op: &'static str, detail: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("invalid model config: {field}: {detail}")]
    Config { field: &'static str, detail: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("optimizer state inconsistent with registry: {0}")]
    Consistency(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{op}: no cached forward pass (call the training forward first)")]
    MissingCache { op: &'static str },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn geom(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Geometry { op, detail: detail.into() }
    }

    pub(crate) fn config(field: &'static str, detail: impl Into<String>) -> Self {
        Error::Config { field, detail: detail.into() }
    }
}
