use std::path::PathBuf;

use crate::diff::Node;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at row {row}, column {col} of {what}")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },

    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("no active convex: every selection column is empty or disabled")]
    NoActiveConvex,

    #[error("backward called before a forward pass was recorded")]
    NoForward,

    #[error("non-finite gradient produced at node {node}")]
    NonFiniteGradient { node: Node },

    #[error("non-finite gradient in variable group {group} at index {index}; step rejected")]
    RejectedStep { group: &'static str, index: usize },

    #[error("invalid camera: {0}")]
    Camera(String),

    #[error("empty mask: no foreground pixels to sample contours from")]
    EmptyMask,

    #[error("operation requires {expected} selection mode")]
    Mode { expected: &'static str },

    #[error("dataset validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format version mismatch: file has {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error("empty mesh given to {0}")]
    EmptyMesh(&'static str),

    #[error("unknown scene `{name}`; available: {}", .available.join(", "))]
    UnknownScene {
        name: String,
        available: Vec<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for failures caused by bad inputs rather than numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Config(_)
                | Error::Camera(_)
                | Error::UnknownScene { .. }
                | Error::Version { .. }
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::EmptyMask
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
