//! Unsupervised fiber detection and tracking in serial-section images.
//!
//! The pipeline initializes per-frame pseudo labels without supervision
//! (segmentation + Hough ellipses, or generic proposals), trains a detector
//! on them, tracks the detections through the sequence with a Kalman filter
//! bank, and feeds the spatio-temporally cleaned tracks back as the next
//! round of labels.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod initializer;
pub mod io;
pub mod raster;
pub mod segmentation;
pub mod selftrain;
pub mod synth;
pub mod tracker;

pub use error::{Error, Result};
pub use geometry::{center_distance, iou, nms, BBox, Detection, PseudoGT};
