use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("schema error in {record}: {reason}")]
    Schema { record: String, reason: String },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("unknown symptom id {0}")]
    UnknownSymptom(usize),
    #[error("k = {k} is outside 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

impl Error {
    pub(crate) fn schema(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema { record: record.into(), reason: reason.into() }
    }
}

/// Fails with [`Error::Numeric`] if `m` holds a NaN or infinity.
pub(crate) fn ensure_finite(m: &crate::tensor::Matrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(alloc::format!("non-finite values in {what}")))
    }
}
