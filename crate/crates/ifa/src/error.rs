use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("coordinate ({row}, {col}) outside a {height}x{width} map")]
    OutOfBounds {
        row: i64,
        col: i64,
        height: usize,
        width: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("instance {0} not present in the identity map")]
    UnknownInstance(u32),

    #[error("no inter-frame offsets available for reference frame {0}")]
    MissingReference(usize),

    #[error("map file: {0}")]
    MapFormat(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("scene: {0}")]
    Scene(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
