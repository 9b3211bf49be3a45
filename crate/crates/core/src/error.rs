use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors for the whole crate. Variants map onto the CLI exit-code classes:
/// I/O (2), numeric (3), config mismatch (4), input constraints (5).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or vector extents do not line up for the requested op.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// API misuse: stale context, empty record set, zero downsample ratio, ...
    #[error("usage: {0}")]
    Usage(String),

    /// Non-finite values where finite arithmetic is required.
    #[error("numeric: {0}")]
    Numeric(String),

    /// A region mapped to an empty rectangle on the feature map.
    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    /// Vote histogram with zero total votes.
    #[error("empty histogram: total vote count is zero")]
    EmptyHistogram,

    /// Theme id outside the configured theme vocabulary.
    #[error("theme {theme} out of range (theme count {count})")]
    ThemeRange { theme: usize, count: usize },

    /// Correlation undefined (constant sequence).
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    /// Input violates a size constraint (image larger than canvas, ...).
    #[error("size constraint: {0}")]
    Size(String),

    /// Manifest line failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Manifest record violates the dataset schema.
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    /// Checkpoint/config digest mismatch or malformed configuration.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// Corrupt or unreadable checkpoint container.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
