use thiserror::Error;

#[derive(Debug, Error)]
pub enum HibError {
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error("unknown tier `{0}` (expected ordinary, ood or far_ood)")]
    UnknownTier(String),
    #[error("unknown variant `{0}`")]
    UnknownVariant(String),
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dim { what: &'static str, expected: usize, got: usize },
    #[error("invalid {what}: {msg}")]
    Invalid { what: &'static str, msg: String },
    #[error("degenerate vector in {0}: norm below 1e-12")]
    Degenerate(&'static str),
    #[error("config: {0}")]
    Config(String),
    #[error("value iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("{path}:{line}: {msg}")]
    Malformed { path: String, line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HibError>;

pub(crate) fn invalid(what: &'static str, msg: impl Into<String>) -> HibError {
    HibError::Invalid { what, msg: msg.into() }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(HibError::Dim { what, expected, got })
    }
}
