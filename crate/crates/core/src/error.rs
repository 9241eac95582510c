use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1 and the element count must fit in memory")]
    InvalidShape([usize; 4]),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: [usize; 4], right: [usize; 4] },

    #[error("channel mismatch: layer expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("kernel {kernel}x{kernel} does not fit in padded input {h}x{w} (pad {pad})")]
    KernelTooLarge { kernel: usize, h: usize, w: usize, pad: usize },

    #[error("batch norm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),

    #[error("batch norm running statistics have not been initialized")]
    UninitializedRunningStats,

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("frozen noise matrix has shape {cached:?}, requested {requested:?}")]
    FrozenShape { cached: [usize; 4], requested: [usize; 4] },

    #[error("image {h}x{w} is smaller than patch size {patch}")]
    ImageTooSmall { h: usize, w: usize, patch: usize },

    #[error("image is smaller than the {0}x{0} SSIM window")]
    SmallerThanWindow(usize),

    #[error("no patches to batch")]
    EmptyPatchSet,

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 1 config, 2 I/O, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::UnsupportedImage(_) | Error::Checkpoint(_) => 2,
            Error::Numerical(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
