use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    /// A point lands behind (or on) the camera plane.
    #[error("point {column} has non-positive camera depth {depth}")]
    Cheirality { column: usize, depth: f64 },

    /// Cheirality violation located inside a multi-video objective.
    #[error("body behind camera in video {video}, frame {frame} (depth {depth})")]
    CheiralityAt { video: usize, frame: usize, depth: f64 },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("insufficient constraints: {0}")]
    InsufficientConstraints(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Schema { path: String, message: String },
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical breakdown.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Dimension(_)
                | Error::Skeleton(_)
                | Error::Input(_)
                | Error::Config(_)
                | Error::Io { .. }
                | Error::Schema { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
