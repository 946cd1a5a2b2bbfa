use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence of {len} tokens exceeds context length {max}; drop earlier turns to fit")]
    ContextOverflow { len: usize, max: usize },

    #[error("token id {0} is out of range for the vocabulary")]
    TokenOutOfRange(u32),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("non-finite loss at step {step}: ccl={ccl} igl={igl} gen={gen}")]
    NanLoss { step: usize, ccl: f64, igl: f64, gen: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidInput(alloc::format!($($arg)*))
    };
}
pub(crate) use invalid;
