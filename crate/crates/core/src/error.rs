use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The base diffusion has a zero loading on some coordinate, so the
    /// Malliavin weights would divide by zero.
    #[error("degenerate base diffusion on coordinate {coord}")]
    DegenerateDiffusion { coord: usize },

    #[error("singular diffusion matrix")]
    SingularMatrix,

    /// An outer sample produced a non-finite value. `path` lists the
    /// recursion indices from the outer sample down to the failing node.
    #[error("non-finite value in outer sample {sample} at node path {path:?}")]
    NonFinite { sample: usize, path: Vec<usize> },

    #[error("draw tape mismatch: {0}")]
    DrawTape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::DegenerateDiffusion { .. } | Error::SingularMatrix
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
