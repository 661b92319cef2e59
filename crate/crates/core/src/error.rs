use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): width and height must be positive")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("synthetic generation failed: {0}")]
    Synthesis(String),

    #[error("segmentation failed: class {class} became empty after {retries} restarts")]
    EmptyClass { class: usize, retries: usize },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("no positive training samples in the pseudo ground truth")]
    NoPositives,

    #[error("training needs both positive and negative samples")]
    MissingClass,

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("singular innovation covariance")]
    SingularInnovation,

    #[error("frame count mismatch: {left} vs {right}")]
    FrameCountMismatch { left: usize, right: usize },

    #[error("duplicate entry for track {track} at frame {frame}")]
    DuplicateTrackEntry { track: u64, frame: usize },

    #[error("sequence too short: {frames} frames, need at least {required}")]
    SequenceTooShort { frames: usize, required: usize },

    #[error("iteration {iteration}, {stage}: {source}")]
    Iteration {
        iteration: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("model format: {0}")]
    ModelFormat(String),

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

    pub(crate) fn in_frame(self, frame: usize) -> Self {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_iteration(self, iteration: usize, stage: &'static str) -> Self {
        Error::Iteration {
            iteration,
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the input data or files rather than a bug
    /// or numerical failure inside a component.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Parse { .. }
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::ModelFormat(_)
            | Error::FrameCountMismatch { .. }
            | Error::DuplicateTrackEntry { .. }
            | Error::SequenceTooShort { .. }
            | Error::InvalidBox { .. }
            | Error::Config(_) => true,
            Error::Frame { source, .. } | Error::Iteration { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
