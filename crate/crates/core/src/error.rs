use thiserror::Error;

/// Errors produced by the depth pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Two inputs that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A precondition on an argument was violated.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Configuration or calibration input is unusable.
    #[error("configuration error: {0}")]
    Config(String),
    /// A reduction was requested over an empty set of pixels.
    #[error("empty valid set: {0}")]
    EmptyValidSet(String),
    /// Geometry that cannot produce an answer (parallel rays, no overlap, ...).
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    /// An optimization produced a non-finite loss.
    #[error("numeric divergence: {0}")]
    Divergence(String),
    /// A file did not follow its declared format.
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err($crate::Error::$variant(format!($($arg)+)));
            }
        }
    };
}
pub(crate) use ensure;
