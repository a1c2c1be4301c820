use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by tensor operations, model construction and training.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn shapes(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape { op, detail: alloc::format!("{:?} vs {:?}", a, b) }
    }

    pub(crate) fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain { .. } => "domain",
            Error::NonFinite { .. } => "non_finite",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
        }
    }
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    let v: Vec<String> = shape.iter().map(|d| alloc::format!("{d}")).collect();
    alloc::format!("[{}]", v.join(", "))
}
