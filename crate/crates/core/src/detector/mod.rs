//! Trainable sliding-window fiber detector.
//!
//! Training follows the usual two-stage detector contract: windows that
//! overlap a labeled box by more than `iou_pos` are positives, windows below
//! `iou_neg` against every box are negatives, and everything in between is
//! ignored. A linear classifier (logistic loss) and a linear box regressor
//! (smooth-L1 loss on positives) share one descriptor. Detection scans
//! square windows over a range of sizes derived from the mean labeled box
//! area, regresses the survivors and applies NMS.

mod features;

use std::path::Path;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{FeatureSpec, WindowGrid};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms, BBox, Detection, PseudoGT};
use crate::raster::Plane;

/// Anything that turns one frame into scored boxes. The frame index is
/// passed along so that replaying detectors can serve precomputed output.
pub trait FiberDetector: Sync {
    fn detect(&self, frame: usize, image: &GrayImage) -> Vec<Detection>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub features: FeatureSpec,
    /// Window sides span `sqrt(low..high) * sqrt(mean box area)`.
    pub scale_low_factor: f64,
    pub scale_high_factor: f64,
    pub num_scales: usize,
    /// Window step as a fraction of the window side.
    pub stride_fraction: f64,
    pub detector_nms: f64,
    pub score_threshold: f64,
    pub iou_pos: f64,
    pub iou_neg: f64,
    pub neg_per_pos: f64,
    /// Cap on positives plus negatives drawn from one frame.
    pub samples_per_frame: usize,
    /// Jittered copies drawn around each labeled box.
    pub jitter_per_positive: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the box-regression loss.
    pub reg_weight: f64,
    pub weight_decay: f64,
    /// Rounds of retraining with the model's own confident false positives
    /// added as negatives.
    pub hard_negative_rounds: usize,
    /// Most mined negatives kept per frame and round.
    pub hard_negatives_per_frame: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            features: FeatureSpec::default(),
            scale_low_factor: 0.2,
            scale_high_factor: 2.0,
            num_scales: 7,
            stride_fraction: 0.25,
            detector_nms: 0.3,
            score_threshold: 0.5,
            iou_pos: 0.7,
            iou_neg: 0.3,
            neg_per_pos: 3.0,
            samples_per_frame: 256,
            jitter_per_positive: 3,
            epochs: 10,
            learning_rate: 0.01,
            batch_size: 32,
            reg_weight: 1.0,
            weight_decay: 1e-4,
            hard_negative_rounds: 4,
            hard_negatives_per_frame: 64,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("detector: {m}")));
        if self.features.patch_size < 3 {
            return bad("patch_size must be >= 3");
        }
        if !(self.features.context >= 0.0) {
            return bad("context must be >= 0");
        }
        if !(0.0 < self.scale_low_factor && self.scale_low_factor <= self.scale_high_factor) {
            return bad("need 0 < scale_low_factor <= scale_high_factor");
        }
        if self.num_scales == 0 {
            return bad("num_scales must be >= 1");
        }
        if self.stride_cells().is_none() {
            return bad("stride_fraction must be a whole number of patch cells");
        }
        if !(0.0 < self.score_threshold && self.score_threshold < 1.0) {
            return bad("score_threshold must lie in (0, 1)");
        }
        if !(0.0 <= self.iou_neg && self.iou_neg <= self.iou_pos && self.iou_pos <= 1.0) {
            return bad("need 0 <= iou_neg <= iou_pos <= 1");
        }
        if !(0.0..=1.0).contains(&self.detector_nms) {
            return bad("detector_nms must lie in [0, 1]");
        }
        if !(self.neg_per_pos > 0.0) || self.samples_per_frame < 2 || self.batch_size == 0 {
            return bad("neg_per_pos, samples_per_frame and batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.reg_weight >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive, reg_weight and weight_decay non-negative");
        }
        Ok(())
    }

    /// Window step in patch cells, if the stride lands on whole cells.
    fn stride_cells(&self) -> Option<usize> {
        let f = &self.features;
        let cells = f.patch_size as f64 * self.stride_fraction / (1.0 + 2.0 * f.context);
        let rounded = cells.round();
        ((cells - rounded).abs() < 1e-9 && rounded >= 1.0).then_some(rounded as usize)
    }

    /// Geometric series of window sides covering the size prior.
    pub fn window_sides(&self, mean_area: f64) -> Vec<f64> {
        let lo = (self.scale_low_factor * mean_area).sqrt();
        let hi = (self.scale_high_factor * mean_area).sqrt();
        if self.num_scales == 1 {
            return vec![mean_area.sqrt()];
        }
        let ratio = (hi / lo).powf(1.0 / (self.num_scales - 1) as f64);
        (0..self.num_scales).map(|k| lo * ratio.powi(k as i32)).collect()
    }
}

/// Box-regression target of `window` towards `target`: center offsets in
/// window units and log size ratios.
pub fn regression_target(window: &BBox, target: &BBox) -> [f64; 4] {
    let (wx, wy) = window.center();
    let (tx, ty) = target.center();
    [
        (tx - wx) / window.width(),
        (ty - wy) / window.height(),
        (target.width() / window.width()).ln(),
        (target.height() / window.height()).ln(),
    ]
}

/// Inverse of [`regression_target`].
pub fn apply_regression(window: &BBox, offsets: &[f64; 4]) -> BBox {
    let (wx, wy) = window.center();
    let cx = wx + offsets[0] * window.width();
    let cy = wy + offsets[1] * window.height();
    // keep absurd offsets from exploding the box
    let w = window.width() * offsets[2].clamp(-1.0, 1.0).exp();
    let h = window.height() * offsets[3].clamp(-1.0, 1.0).exp();
    BBox::from_corners_lenient(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h, 1e-3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateLabel {
    /// Overlaps the labeled box at this index by more than `iou_pos`.
    Positive(usize),
    Negative,
    Ignored,
}

/// Labels a candidate window against the labeled boxes of its frame.
pub fn label_candidate(candidate: &BBox, labeled: &[BBox], iou_pos: f64, iou_neg: f64) -> CandidateLabel {
    let mut best = (0.0, 0);
    for (k, b) in labeled.iter().enumerate() {
        let v = iou(candidate, b);
        if v > best.0 {
            best = (v, k);
        }
    }
    if best.0 > iou_pos {
        CandidateLabel::Positive(best.1)
    } else if best.0 < iou_neg {
        CandidateLabel::Negative
    } else {
        CandidateLabel::Ignored
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub frame: usize,
    pub bbox: BBox,
    pub features: Vec<f64>,
    /// Labeled box a positive regresses to; `None` for negatives.
    pub target: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub positives: Vec<TrainingSample>,
    pub negatives: Vec<TrainingSample>,
    /// Mean area of the labeled boxes the set was drawn from.
    pub mean_box_area: f64,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const MAX_DRAW_ATTEMPTS: usize = 50;

/// Draws labeled training windows from every frame of `frames` using the
/// boxes of `labels` as ground truth.
pub fn sample_training_patches(frames: &[GrayImage], labels: &PseudoGT, cfg: &DetectorConfig) -> Result<SampleSet> {
    cfg.validate()?;
    if labels.num_frames() != frames.len() {
        return Err(Error::FrameCountMismatch {
            left: frames.len(),
            right: labels.num_frames(),
        });
    }
    let mean_area = labels.mean_area().ok_or(Error::NoPositives)?;
    let sides = cfg.window_sides(mean_area);
    let per_frame: Vec<(Vec<TrainingSample>, Vec<TrainingSample>)> = frames
        .par_iter()
        .enumerate()
        .map(|(f, img)| sample_frame(f, img, &labels.frames[f], &sides, cfg))
        .collect();
    let mut set = SampleSet {
        mean_box_area: mean_area,
        ..SampleSet::default()
    };
    for (p, n) in per_frame {
        set.positives.extend(p);
        set.negatives.extend(n);
    }
    if set.positives.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(set)
}

fn sample_frame(
    frame: usize,
    image: &GrayImage,
    labeled: &[BBox],
    sides: &[f64],
    cfg: &DetectorConfig,
) -> (Vec<TrainingSample>, Vec<TrainingSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(frame as u64 + 1);
    let plane = Plane::from_gray(image);
    let (w, h) = (plane.width as f64, plane.height as f64);

    let mut pos_boxes: Vec<(BBox, usize)> = Vec::new();
    for (k, b) in labeled.iter().enumerate() {
        pos_boxes.push((*b, k));
        let side = b.area().sqrt();
        for _ in 0..cfg.jitter_per_positive {
            for _ in 0..MAX_DRAW_ATTEMPTS {
                let s = side * rng.random_range(-0.2f64..=0.2).exp();
                let (cx, cy) = b.center();
                let cx = cx + rng.random_range(-0.15..=0.15) * side;
                let cy = cy + rng.random_range(-0.15..=0.15) * side;
                let Ok(cand) = BBox::from_center(cx, cy, 0.5 * s, 0.5 * s) else {
                    continue;
                };
                if let CandidateLabel::Positive(j) = label_candidate(&cand, labeled, cfg.iou_pos, cfg.iou_neg) {
                    pos_boxes.push((cand, j));
                    break;
                }
            }
        }
    }
    let pos_cap = ((cfg.samples_per_frame as f64 / (1.0 + cfg.neg_per_pos)).ceil() as usize).max(1);
    if pos_boxes.len() > pos_cap {
        pos_boxes.shuffle(&mut rng);
        pos_boxes.truncate(pos_cap);
    }
    let neg_target = ((pos_boxes.len().max(1) as f64 * cfg.neg_per_pos).round() as usize)
        .min(cfg.samples_per_frame.saturating_sub(pos_boxes.len()));

    let mut neg_boxes = Vec::with_capacity(neg_target);
    let mut attempts = 0;
    while neg_boxes.len() < neg_target && attempts < neg_target * MAX_DRAW_ATTEMPTS {
        attempts += 1;
        let s = sides[rng.random_range(0..sides.len())];
        if s >= w || s >= h {
            continue;
        }
        let x = rng.random_range(0.0..w - s);
        let y = rng.random_range(0.0..h - s);
        let cand = BBox {
            x1: x,
            y1: y,
            x2: x + s,
            y2: y + s,
        };
        if label_candidate(&cand, labeled, cfg.iou_pos, cfg.iou_neg) == CandidateLabel::Negative {
            neg_boxes.push(cand);
        }
    }

    let spec = &cfg.features;
    let positives = pos_boxes
        .into_iter()
        .map(|(b, k)| TrainingSample {
            frame,
            bbox: b,
            features: spec.extract(&plane, &b),
            target: Some(labeled[k]),
        })
        .collect();
    let negatives = neg_boxes
        .into_iter()
        .map(|b| TrainingSample {
            frame,
            bbox: b,
            features: spec.extract(&plane, &b),
            target: None,
        })
        .collect();
    (positives, negatives)
}

/// One linear output `w . x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

/// Classifier plus the four box-regression outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heads {
    pub classifier: LinearHead,
    pub regressor: Vec<LinearHead>,
}

/// One standardized example for [`Heads::loss_and_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub positive: bool,
    pub target: [f64; 4],
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-log sigmoid(z)` for positives and `-log(1 - sigmoid(z))` for negatives,
/// computed without overflow.
fn logistic_loss(z: f64, positive: bool) -> f64 {
    let m = if positive { -z } else { z };
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

fn smooth_l1(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

impl Heads {
    pub fn zeros(dim: usize) -> Self {
        Self {
            classifier: LinearHead::zeros(dim),
            regressor: (0..4).map(|_| LinearHead::zeros(dim)).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        self.classifier.is_finite() && self.regressor.iter().all(LinearHead::is_finite)
    }

    /// Mean over `batch` of the logistic loss plus `reg_weight` times the
    /// smooth-L1 regression loss (positives only), plus an L2 penalty
    /// `0.5 * decay * |w|^2` on all weights (not biases). Returns the loss
    /// and its gradient laid out like `self`.
    pub fn loss_and_gradient(&self, batch: &[&Example], reg_weight: f64, decay: f64) -> (f64, Heads) {
        let dim = self.classifier.weights.len();
        let mut grad = Heads::zeros(dim);
        let n = batch.len().max(1) as f64;
        let mut loss = 0.0;
        for ex in batch {
            let z = self.classifier.eval(&ex.x);
            loss += logistic_loss(z, ex.positive);
            let dz = (sigmoid(z) - if ex.positive { 1.0 } else { 0.0 }) / n;
            axpy(&mut grad.classifier.weights, dz, &ex.x);
            grad.classifier.bias += dz;
            if ex.positive && reg_weight > 0.0 {
                for (k, head) in self.regressor.iter().enumerate() {
                    let (l, d) = smooth_l1(head.eval(&ex.x) - ex.target[k]);
                    loss += reg_weight * l;
                    let g = reg_weight * d / n;
                    axpy(&mut grad.regressor[k].weights, g, &ex.x);
                    grad.regressor[k].bias += g;
                }
            }
        }
        loss /= n;
        if decay > 0.0 {
            for (head, g) in std::iter::once((&self.classifier, &mut grad.classifier))
                .chain(self.regressor.iter().zip(grad.regressor.iter_mut()))
            {
                loss += 0.5 * decay * head.weights.iter().map(|w| w * w).sum::<f64>();
                axpy(&mut g.weights, decay, &head.weights);
            }
        }
        (loss, grad)
    }

    /// `self -= step * grad`.
    fn descend(&mut self, grad: &Heads, step: f64) {
        for (h, g) in std::iter::once((&mut self.classifier, &grad.classifier))
            .chain(self.regressor.iter_mut().zip(grad.regressor.iter()))
        {
            axpy(&mut h.weights, -step, &g.weights);
            h.bias -= step * g.bias;
        }
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Trained detector with everything needed to run it on new images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub features: FeatureSpec,
    pub window_sides: Vec<f64>,
    /// Typical label box side; window sides enter the classifier relative
    /// to it.
    pub reference_side: f64,
    pub stride_fraction: f64,
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Per-dimension standardization applied before the heads.
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    pub heads: Heads,
    pub epochs_seen: usize,
    pub seed: u64,
    /// Mean training loss before the first epoch and after each epoch of
    /// the most recent training run.
    pub loss_history: Vec<f64>,
}

/// Number of scale terms appended to the window descriptor.
const SCALE_TERMS: usize = 2;

/// Scale terms of a window: log side relative to `reference_side` and its
/// square, so a linear classifier can prefer a band of sizes the way
/// per-anchor objectness outputs do.
pub fn scale_terms(window: &BBox, reference_side: f64) -> [f64; SCALE_TERMS] {
    let u = (window.area().sqrt() / reference_side).ln();
    [u, u * u]
}

/// Classifier input size for a descriptor layout.
pub fn input_dim(features: &FeatureSpec) -> usize {
    features.dim() + SCALE_TERMS
}

fn model_input(window: &BBox, descriptor: &[f64], reference_side: f64) -> Vec<f64> {
    let mut x = descriptor.to_vec();
    x.extend(scale_terms(window, reference_side));
    x
}

impl DetectorModel {
    /// Descriptor of `window` followed by its scale terms.
    pub fn input(&self, window: &BBox, descriptor: &[f64]) -> Vec<f64> {
        model_input(window, descriptor, self.reference_side)
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    /// Classifier probability for `window` with raw descriptor `descriptor`.
    pub fn score(&self, window: &BBox, descriptor: &[f64]) -> f64 {
        sigmoid(
            self.heads
                .classifier
                .eval(&self.standardize(&self.input(window, descriptor))),
        )
    }

    fn examples(&self, samples: &SampleSet) -> Vec<Example> {
        let pos = samples.positives.iter().map(|s| Example {
            x: self.standardize(&self.input(&s.bbox, &s.features)),
            positive: true,
            target: regression_target(&s.bbox, &s.target.expect("positive samples carry a target")),
        });
        let neg = samples.negatives.iter().map(|s| Example {
            x: self.standardize(&self.input(&s.bbox, &s.features)),
            positive: false,
            target: [0.0; 4],
        });
        pos.chain(neg).collect()
    }

    /// Mean training loss of the model on `samples`.
    pub fn loss(&self, samples: &SampleSet, cfg: &DetectorConfig) -> f64 {
        let examples = self.examples(samples);
        let refs: Vec<&Example> = examples.iter().collect();
        self.heads.loss_and_gradient(&refs, cfg.reg_weight, cfg.weight_decay).0
    }

    /// Folds standardization into the classifier and regressor weights.
    fn folded(&self) -> Heads {
        let fold = |h: &LinearHead| {
            let mut bias = h.bias;
            let weights = h
                .weights
                .iter()
                .zip(&self.feature_mean)
                .zip(&self.feature_scale)
                .map(|((w, m), s)| {
                    bias -= w * m * s;
                    w * s
                })
                .collect();
            LinearHead { weights, bias }
        };
        Heads {
            classifier: fold(&self.heads.classifier),
            regressor: self.heads.regressor.iter().map(fold).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dim = input_dim(&self.features);
        let shapes_ok = self.feature_mean.len() == dim
            && self.feature_scale.len() == dim
            && self.heads.classifier.weights.len() == dim
            && self.heads.regressor.len() == 4
            && self.heads.regressor.iter().all(|h| h.weights.len() == dim);
        if !shapes_ok {
            return Err(Error::ModelFormat("weight shapes do not match the feature spec".into()));
        }
        if !self.heads.is_finite() || self.window_sides.is_empty() || !(self.reference_side > 0.0) {
            return Err(Error::ModelFormat("non-finite weights or empty scale list".into()));
        }
        if !(0.0 < self.score_threshold && self.score_threshold < 1.0) {
            return Err(Error::ModelFormat("score_threshold outside (0, 1)".into()));
        }
        Ok(())
    }

    fn stride_cells(&self) -> usize {
        let f = &self.features;
        let cells = f.patch_size as f64 * self.stride_fraction / (1.0 + 2.0 * f.context);
        (cells.round() as usize).max(1)
    }

    /// Every window scoring above the threshold, before regression and
    /// NMS, with its score and descriptor.
    pub fn scan(&self, image: &GrayImage) -> Vec<(BBox, f64, Vec<f64>)> {
        let plane = Plane::from_gray(image);
        let heads = self.folded();
        let stride = self.stride_cells();
        let mut hits = Vec::new();
        for &side in &self.window_sides {
            let grid = WindowGrid::new(&self.features, &plane, side, stride);
            let d = self.features.dim();
            let scale = scale_terms(&grid.window(0, 0), self.reference_side);
            let w = &heads.classifier.weights;
            let bias = heads.classifier.bias + w[d] * scale[0] + w[d + 1] * scale[1];
            let responses = grid.responses(&w[..d], bias);
            for row in 0..grid.rows {
                for col in 0..grid.cols {
                    let score = sigmoid(responses[row * grid.cols + col]);
                    if score > self.score_threshold {
                        hits.push((grid.window(col, row), score, grid.features(col, row)));
                    }
                }
            }
        }
        hits
    }

    /// Scans every window size over `image` and returns NMS-filtered,
    /// regressed boxes scoring above the threshold.
    pub fn detect_image(&self, frame: usize, image: &GrayImage) -> Vec<Detection> {
        let heads = self.folded();
        let raw: Vec<Detection> = self
            .scan(image)
            .into_iter()
            .map(|(window, score, x)| {
                let x = self.input(&window, &x);
                let offsets = [0, 1, 2, 3].map(|k| heads.regressor[k].eval(&x));
                Detection::new(frame, apply_regression(&window, &offsets), score)
            })
            .collect();
        nms(&raw, self.nms_threshold)
    }
}

impl FiberDetector for DetectorModel {
    fn detect(&self, frame: usize, image: &GrayImage) -> Vec<Detection> {
        self.detect_image(frame, image)
    }
}

/// Runs `detector` on every image in parallel.
pub fn detect_all(detector: &dyn FiberDetector, images: &[GrayImage]) -> Vec<Vec<Detection>> {
    images
        .par_iter()
        .enumerate()
        .map(|(f, img)| detector.detect(f, img))
        .collect()
}

/// Trains a fresh model on `samples`.
pub fn train(samples: &SampleSet, cfg: &DetectorConfig) -> Result<DetectorModel> {
    cfg.validate()?;
    check_classes(samples)?;
    let dim = input_dim(&cfg.features);
    let reference_side = samples.mean_box_area.sqrt();
    let (mean, scale) = standardization(samples, dim, reference_side);
    let model = DetectorModel {
        features: cfg.features.clone(),
        window_sides: cfg.window_sides(samples.mean_box_area),
        reference_side,
        stride_fraction: cfg.stride_fraction,
        score_threshold: cfg.score_threshold,
        nms_threshold: cfg.detector_nms,
        feature_mean: mean,
        feature_scale: scale,
        heads: Heads::zeros(dim),
        epochs_seen: 0,
        seed: cfg.seed,
        loss_history: Vec::new(),
    };
    run_sgd(model, samples, cfg, cfg.epochs)
}

/// Continues training `model` on `samples` for `epochs` epochs. The
/// descriptor standardization is kept; the window sizes follow the new
/// labels' mean box area.
pub fn fine_tune(
    model: &DetectorModel,
    samples: &SampleSet,
    cfg: &DetectorConfig,
    epochs: usize,
) -> Result<DetectorModel> {
    cfg.validate()?;
    model.validate()?;
    if epochs == 0 {
        return Ok(model.clone());
    }
    check_classes(samples)?;
    let mut start = model.clone();
    start.window_sides = cfg.window_sides(samples.mean_box_area);
    start.reference_side = samples.mean_box_area.sqrt();
    start.score_threshold = cfg.score_threshold;
    start.nms_threshold = cfg.detector_nms;
    start.seed = cfg.seed;
    run_sgd(start, samples, cfg, epochs)
}

/// Windows the model accepts that are negatives against `labels`, the
/// highest-scoring `per_frame` of each frame.
pub fn mine_hard_negatives(
    model: &DetectorModel,
    frames: &[GrayImage],
    labels: &PseudoGT,
    cfg: &DetectorConfig,
    per_frame: usize,
) -> Vec<TrainingSample> {
    frames
        .par_iter()
        .enumerate()
        .map(|(f, img)| {
            let mut hits: Vec<(BBox, f64, Vec<f64>)> = model
                .scan(img)
                .into_iter()
                .filter(|(w, _, _)| {
                    label_candidate(w, &labels.frames[f], cfg.iou_pos, cfg.iou_neg) == CandidateLabel::Negative
                })
                .collect();
            hits.sort_by(|a, b| b.1.total_cmp(&a.1));
            hits.truncate(per_frame);
            hits.into_iter()
                .map(|(bbox, _, features)| TrainingSample {
                    frame: f,
                    bbox,
                    features,
                    target: None,
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect()
}

/// Full training recipe on labeled frames: sample windows, train (or
/// fine-tune `previous`), then alternate hard-negative mining and
/// fine-tuning.
pub fn train_on_frames(
    frames: &[GrayImage],
    labels: &PseudoGT,
    cfg: &DetectorConfig,
    previous: Option<&DetectorModel>,
) -> Result<DetectorModel> {
    let mut samples = sample_training_patches(frames, labels, cfg)?;
    let mut model = match previous {
        Some(m) => fine_tune(m, &samples, cfg, cfg.epochs)?,
        None => train(&samples, cfg)?,
    };
    for _ in 0..cfg.hard_negative_rounds {
        let mined = mine_hard_negatives(&model, frames, labels, cfg, cfg.hard_negatives_per_frame);
        if mined.is_empty() {
            break;
        }
        samples.negatives.extend(mined);
        model = fine_tune(&model, &samples, cfg, cfg.epochs)?;
    }
    Ok(model)
}

fn check_classes(samples: &SampleSet) -> Result<()> {
    if samples.positives.is_empty() {
        return Err(Error::NoPositives);
    }
    if samples.negatives.is_empty() {
        return Err(Error::MissingClass);
    }
    Ok(())
}

fn standardization(samples: &SampleSet, dim: usize, reference_side: f64) -> (Vec<f64>, Vec<f64>) {
    let all: Vec<Vec<f64>> = samples
        .positives
        .iter()
        .chain(&samples.negatives)
        .map(|s| model_input(&s.bbox, &s.features, reference_side))
        .collect();
    let n = all.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in &all {
        axpy(&mut mean, 1.0 / n, x);
    }
    let mut var = vec![0.0; dim];
    for s in &all {
        for (v, (x, m)) in var.iter_mut().zip(s.iter().zip(&mean)) {
            *v += (x - m) * (x - m) / n;
        }
    }
    let scale = var.iter().map(|v| 1.0 / v.sqrt().max(1e-3)).collect();
    (mean, scale)
}

fn run_sgd(
    mut model: DetectorModel,
    samples: &SampleSet,
    cfg: &DetectorConfig,
    epochs: usize,
) -> Result<DetectorModel> {
    let examples = model.examples(samples);
    let all: Vec<&Example> = examples.iter().collect();
    let full_loss = |heads: &Heads| heads.loss_and_gradient(&all, cfg.reg_weight, cfg.weight_decay).0;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = vec![full_loss(&model.heads)];
    // SGD at a fixed step can bounce out of a good basin when the labels
    // contradict each other, so the lowest-loss weights seen are kept.
    let mut best = (history[0], model.heads.clone());
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (_, grad) = model.heads.loss_and_gradient(&batch, cfg.reg_weight, cfg.weight_decay);
            model.heads.descend(&grad, cfg.learning_rate);
        }
        let loss = full_loss(&model.heads);
        if !loss.is_finite() || !model.heads.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        history.push(loss);
        if loss < best.0 {
            best = (loss, model.heads.clone());
        }
    }
    model.heads = best.1;
    model.epochs_seen += epochs;
    model.loss_history = history;
    Ok(model)
}

const MODEL_FORMAT: &str = "fibertrack-detector";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize)]
struct ModelFileOut<'a> {
    format: &'a str,
    version: u32,
    model: &'a DetectorModel,
}

#[derive(Deserialize)]
struct ModelFileIn {
    format: String,
    version: u32,
    model: serde_json::Value,
}

pub fn save_model(model: &DetectorModel, path: &Path) -> Result<()> {
    let file = ModelFileOut {
        format: MODEL_FORMAT,
        version: MODEL_VERSION,
        model,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::ModelFormat(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<DetectorModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFileIn =
        serde_json::from_str(&text).map_err(|e| Error::ModelFormat(format!("{}: {e}", path.display())))?;
    if file.format != MODEL_FORMAT {
        return Err(Error::ModelFormat(format!("unknown model format `{}`", file.format)));
    }
    if file.version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "model version {} is not supported (expected {MODEL_VERSION})",
            file.version
        )));
    }
    let model: DetectorModel =
        serde_json::from_value(file.model).map_err(|e| Error::ModelFormat(format!("{}: {e}", path.display())))?;
    model.validate()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(x: f64, y: f64, s: f64) -> BBox {
        BBox::new(x, y, x + s, y + s).unwrap()
    }

    #[test]
    fn candidate_labels_follow_overlap_bands() {
        let gt = [unit(0.0, 0.0, 10.0)];
        // IoU 0.8: a 10x8 box inside
        assert_eq!(
            label_candidate(&BBox::new(0.0, 0.0, 10.0, 8.0).unwrap(), &gt, 0.7, 0.3),
            CandidateLabel::Positive(0)
        );
        // IoU 0.1: a 10x1 sliver
        assert_eq!(
            label_candidate(&BBox::new(0.0, 0.0, 10.0, 1.0).unwrap(), &gt, 0.7, 0.3),
            CandidateLabel::Negative
        );
        // IoU 0.5
        assert_eq!(
            label_candidate(&BBox::new(0.0, 0.0, 10.0, 5.0).unwrap(), &gt, 0.7, 0.3),
            CandidateLabel::Ignored
        );
    }

    #[test]
    fn regression_round_trip() {
        let w = unit(10.0, 20.0, 12.0);
        let t = BBox::new(11.0, 19.5, 24.0, 31.0).unwrap();
        let back = apply_regression(&w, &regression_target(&w, &t));
        for (a, b) in [(back.x1, t.x1), (back.y1, t.y1), (back.x2, t.x2), (back.y2, t.y2)] {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn logistic_loss_is_stable() {
        assert!((logistic_loss(0.0, true) - 2f64.ln()).abs() < 1e-12);
        assert!(logistic_loss(800.0, true) < 1e-12);
        assert!((logistic_loss(800.0, false) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn window_sides_span_the_size_prior() {
        let cfg = DetectorConfig::default();
        let sides = cfg.window_sides(100.0);
        assert_eq!(sides.len(), 7);
        assert!((sides[0] - 20f64.sqrt()).abs() < 1e-9);
        assert!((sides[6] - 200f64.sqrt()).abs() < 1e-9);
        assert_eq!(cfg.stride_cells(), Some(4));
    }

    #[test]
    fn rejects_fractional_stride() {
        let cfg = DetectorConfig {
            stride_fraction: 0.3,
            ..DetectorConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
