use thiserror::Error;

/// Errors raised by tensor operations, group constructions and the
/// self-supervised pipelines built on top of them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("not a permutation: {0}")]
    Permutation(String),

    #[error("non-finite value encountered: {0}")]
    Numeric(String),

    #[error("group error: {0}")]
    Group(String),

    #[error("unsupported kernel size {0}: filter transforms need an odd extent")]
    UnsupportedKernel(usize),

    #[error("label space is not a disjoint union of free orbits: {0}")]
    Representation(String),

    #[error("extent error: {0}")]
    Extent(String),

    #[error("permutation {0:?} is not a member of the subset (corrupted subset?)")]
    ClosureViolation(Vec<u8>),

    #[error("block structure mismatch: {0}")]
    Structure(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
