use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in layer {layer}, stage {stage}")]
    NonFinite { layer: usize, stage: &'static str },

    #[error("numeric range exceeded in {0}; recompute the row densely")]
    NumericRange(&'static str),

    #[error("unsupported stage {0} (the MLP is never delta-pruned)")]
    UnsupportedStage(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("report is missing layer {layer}, stage {stage}")]
    MissingEntry { layer: usize, stage: &'static str },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("tensor {name} overruns payload: [{start}, {end}) beyond {len}")]
    Bounds {
        name: String,
        start: u64,
        end: u64,
        len: u64,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("malformed CSV: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left, right }
    }

    /// Process exit code for the command line: 3 format, 4 shape, 5 numeric,
    /// 6 I/O, 1 anything else. Usage errors (2) are raised by the argument
    /// parser before any of these can occur.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::Bounds { .. }
            | Error::Header(_)
            | Error::Csv(_) => 3,
            Error::Shape { .. } | Error::TensorShape { .. } | Error::Config(_) => 4,
            Error::NonFinite { .. } | Error::NumericRange(_) => 5,
            Error::Io(_) => 6,
            _ => 1,
        }
    }
}
