//! Generic object proposals: anything mapping an image to scored boxes.

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::raster::{connected_components, Plane};

/// A source of class-agnostic scored boxes for one image.
pub trait ProposalSource: Sync {
    fn propose(&self, image: &GrayImage) -> Vec<(BBox, f64)>;
}

/// Reference proposal source: connected blobs of the thresholded gradient
/// magnitude. Score is the blob's mean gradient relative to the frame's
/// strongest blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientBlobProposals {
    /// Pre-smoothing before the Sobel operator.
    pub smoothing_sigma: f64,
    /// Threshold = mean + `threshold_sd` standard deviations of the magnitude.
    pub threshold_sd: f64,
    /// Blobs smaller than this many pixels are ignored.
    pub min_pixels: usize,
}

impl Default for GradientBlobProposals {
    fn default() -> Self {
        Self {
            smoothing_sigma: 1.0,
            threshold_sd: 1.0,
            min_pixels: 6,
        }
    }
}

impl ProposalSource for GradientBlobProposals {
    fn propose(&self, image: &GrayImage) -> Vec<(BBox, f64)> {
        let plane = Plane::from_gray(image).gaussian_blur(self.smoothing_sigma);
        let grad = plane.gradient_magnitude();
        let n = grad.data.len() as f64;
        let mean = grad.data.iter().sum::<f64>() / n;
        let sd = (grad.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let threshold = mean + self.threshold_sd * sd;
        let mask: Vec<bool> = grad.data.iter().map(|&v| v > threshold).collect();

        let mut raw = Vec::new();
        for comp in connected_components(&mask, grad.width, grad.height) {
            if comp.len() < self.min_pixels {
                continue;
            }
            let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
            let mut total = 0.0;
            for &(x, y) in &comp {
                x1 = x1.min(x);
                y1 = y1.min(y);
                x2 = x2.max(x);
                y2 = y2.max(y);
                total += grad.get(x, y);
            }
            let bbox = BBox {
                x1: x1 as f64,
                y1: y1 as f64,
                x2: (x2 + 1) as f64,
                y2: (y2 + 1) as f64,
            };
            raw.push((bbox, total / comp.len() as f64));
        }
        let top = raw.iter().map(|r| r.1).fold(0.0, f64::max);
        if top > 0.0 {
            for r in raw.iter_mut() {
                r.1 = (r.1 / top).clamp(0.0, 1.0);
            }
        }
        raw
    }
}
