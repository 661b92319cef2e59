//! Iteration-0 pseudo ground truth.
//!
//! Two unsupervised routes: segmentation followed by Hough ellipse fitting
//! (`Emmpmh`), or generic proposals pruned by a size prior and a strict NMS
//! (`Proposals`).

mod ellipse;
mod hough;
mod proposals;

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use ellipse::{min_bbox, Ellipse};
pub use hough::{hough_ellipses, HoughParams};
pub use proposals::{GradientBlobProposals, ProposalSource};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, Detection, PseudoGT};
use crate::segmentation::{class_mask, emmpm_segment, EmMpmParams};
use crate::synth::SequenceDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Emmpmh,
    Proposals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub method: InitMethod,
    pub size_prior_low_factor: f64,
    pub size_prior_high_factor: f64,
    pub proposal_nms: f64,
    pub hough: HoughParams,
    pub segmentation: EmMpmParams,
    pub proposals: GradientBlobProposals,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            method: InitMethod::Emmpmh,
            size_prior_low_factor: 0.2,
            size_prior_high_factor: 2.0,
            proposal_nms: 0.1,
            hough: HoughParams::default(),
            segmentation: EmMpmParams::default(),
            proposals: GradientBlobProposals::default(),
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.size_prior_low_factor && self.size_prior_low_factor < self.size_prior_high_factor) {
            return Err(Error::Config(
                "init: need 0 < size_prior_low_factor < size_prior_high_factor".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.proposal_nms) {
            return Err(Error::Config("init: proposal_nms must lie in [0, 1]".into()));
        }
        let h = &self.hough;
        if !(0.0 < h.min_semi_axis && h.min_semi_axis <= h.max_semi_axis) || !(h.bin_width > 0.0) {
            return Err(Error::Config("init: invalid hough axis range or bin width".into()));
        }
        self.segmentation.validate()
    }
}

/// Keeps boxes with area in `[low * mean_area, high * mean_area]`.
pub fn size_prior_filter(boxes: &[BBox], mean_area: f64, low_factor: f64, high_factor: f64) -> Vec<BBox> {
    let lo = low_factor * mean_area;
    let hi = high_factor * mean_area;
    boxes
        .iter()
        .filter(|b| {
            let a = b.area();
            a >= lo && a <= hi
        })
        .copied()
        .collect()
}

/// Segmentation + Hough on one frame; boxes are the ellipses' tight bounds.
pub fn emmpmh_frame(image: &GrayImage, cfg: &InitConfig, seed: u64) -> Result<Vec<BBox>> {
    let params = EmMpmParams {
        rng_seed: seed,
        ..cfg.segmentation.clone()
    };
    let labels = emmpm_segment(image, &params)?;
    let mask = class_mask(&labels, image);
    let ellipses = hough_ellipses(&mask, labels.width, labels.height, &cfg.hough);
    Ok(ellipses.iter().map(min_bbox).collect())
}

fn frame_seed(base: u64, frame: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(frame as u64)
}

/// Mean box area of the segmentation+Hough result on the first frame.
pub fn sample_mean_area(dataset: &SequenceDataset, cfg: &InitConfig) -> Result<f64> {
    let first = dataset
        .frames
        .first()
        .ok_or_else(|| Error::Config("init: empty dataset".into()))?;
    let boxes = emmpmh_frame(first, cfg, frame_seed(cfg.segmentation.rng_seed, 0)).map_err(|e| e.in_frame(0))?;
    if boxes.is_empty() {
        return Err(Error::Config(
            "init: no ellipses on the first frame, cannot estimate the size prior".into(),
        ));
    }
    Ok(boxes.iter().map(BBox::area).sum::<f64>() / boxes.len() as f64)
}

/// Proposal boxes for one frame after the size prior and NMS.
pub fn proposal_frame(
    image: &GrayImage,
    frame: usize,
    source: &dyn ProposalSource,
    mean_area: f64,
    cfg: &InitConfig,
) -> Vec<BBox> {
    let dets: Vec<Detection> = source
        .propose(image)
        .into_iter()
        .filter(|(b, _)| {
            let a = b.area();
            a >= cfg.size_prior_low_factor * mean_area && a <= cfg.size_prior_high_factor * mean_area
        })
        .map(|(b, s)| Detection::new(frame, b, s))
        .collect();
    nms(&dets, cfg.proposal_nms).into_iter().map(|d| d.bbox).collect()
}

pub fn initialize_pseudo_gt(dataset: &SequenceDataset, cfg: &InitConfig) -> Result<PseudoGT> {
    initialize_with_source(dataset, cfg, &cfg.proposals)
}

/// As [`initialize_pseudo_gt`] with a caller-provided proposal source for the
/// proposals route.
pub fn initialize_with_source(
    dataset: &SequenceDataset,
    cfg: &InitConfig,
    source: &dyn ProposalSource,
) -> Result<PseudoGT> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("init: empty dataset".into()));
    }
    let frames: Vec<Vec<BBox>> = match cfg.method {
        InitMethod::Emmpmh => dataset
            .frames
            .par_iter()
            .enumerate()
            .map(|(i, img)| emmpmh_frame(img, cfg, frame_seed(cfg.segmentation.rng_seed, i)).map_err(|e| e.in_frame(i)))
            .collect::<Result<_>>()?,
        InitMethod::Proposals => {
            let mean_area = sample_mean_area(dataset, cfg)?;
            dataset
                .frames
                .par_iter()
                .enumerate()
                .map(|(i, img)| proposal_frame(img, i, source, mean_area, cfg))
                .collect()
        }
    };
    Ok(PseudoGT::new(frames))
}
