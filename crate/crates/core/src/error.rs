use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value {value} at node {node}: {context}")]
    NonFinite {
        node: usize,
        value: f64,
        context: String,
    },

    #[error("gram-degenerate: {0}")]
    GramDegenerate(String),

    #[error("leaves Kähler cone: {0}")]
    LeavesKahlerCone(String),

    #[error("rejection stall: {0}")]
    SamplerStall(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics (as opposed to bad user input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::GramDegenerate(_)
                | Error::LeavesKahlerCone(_)
                | Error::SamplerStall(_)
                | Error::Numerical(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
