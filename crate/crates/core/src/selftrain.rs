//! The self-training loop: pseudo labels -> detector -> tracks -> cleaned
//! pseudo labels, repeated until the labels stop changing.
//!
//! Tracks are turned back into per-frame boxes ("tracking as detections"):
//! short trajectories are dropped as transient false positives, bridging
//! predictions fill frames where the detector missed a persistent fiber,
//! and a per-frame NMS merges duplicates. The result replaces the pseudo
//! labels wholesale for the next round.

use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::detector::{detect_all, save_model, train_on_frames, DetectorConfig, DetectorModel, FiberDetector};
use crate::error::{Error, Result};
use crate::evaluation::{detection_metrics, match_boxes, mot_metrics, DetectionMetrics, MotConfig, MotMetrics};
use crate::geometry::{nms_indices, BBox, Detection, PseudoGT};
use crate::initializer::{initialize_pseudo_gt, InitConfig, InitMethod};
use crate::io::{format_tracks, write_detections, TrackRecord};
use crate::synth::SequenceDataset;
use crate::tracker::{track_records, track_sequence, TrackState, TrackStatus, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Trajectories with at most this many entries are dropped.
    pub beta: usize,
    /// Per-frame NMS threshold on refined boxes; when unset, 0.7 after
    /// segmentation-based initialization and 0.1 after proposals.
    pub refine_nms: Option<f64>,
    pub max_iterations: usize,
    /// Stop once the fraction of unmatched pseudo-label boxes between two
    /// rounds falls below this.
    pub convergence_epsilon: f64,
    /// Strip the run of bridging predictions at the end of each dead track
    /// before the length test.
    pub drop_trailing_timeout_predictions: bool,
    /// Take an associated entry's box from its detection rather than from
    /// the filter's corrected state, which lags the evidence when tracks
    /// pick up wrong velocities in cluttered frames.
    pub associated_boxes_from_detections: bool,
    /// Use raw detections as the next labels, bypassing the track
    /// refinement (ablation).
    pub skip_refinement: bool,
    pub init: InitConfig,
    pub detector: DetectorConfig,
    pub tracker: TrackerConfig,
    pub evaluation: MotConfig,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            beta: 5,
            refine_nms: None,
            max_iterations: 4,
            convergence_epsilon: 0.01,
            drop_trailing_timeout_predictions: true,
            associated_boxes_from_detections: true,
            skip_refinement: false,
            init: InitConfig::default(),
            detector: DetectorConfig::default(),
            tracker: TrackerConfig::default(),
            evaluation: MotConfig::default(),
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("loop: max_iterations must be >= 1".into()));
        }
        if !(0.0 < self.convergence_epsilon && self.convergence_epsilon < 1.0) {
            return Err(Error::Config("loop: convergence_epsilon must lie in (0, 1)".into()));
        }
        if let Some(t) = self.refine_nms {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("loop: refine_nms must lie in [0, 1]".into()));
            }
        }
        self.init.validate()?;
        self.detector.validate()?;
        self.tracker.validate()
    }

    pub fn refine_nms(&self) -> f64 {
        self.refine_nms.unwrap_or(match self.init.method {
            InitMethod::Emmpmh => 0.7,
            InitMethod::Proposals => 0.1,
        })
    }

    /// Shortest sequence on which both the death and pruning rules can act.
    pub fn min_frames(&self) -> usize {
        self.tracker.alpha + self.beta
    }
}

/// NMS priority of a refined box that came from a bridging prediction.
const PREDICTED_PRIORITY: f64 = 0.5;

/// Surviving track entries after the length prune and the per-frame NMS,
/// as records (score 1 associated, 0 predicted), ordered by frame then by
/// NMS rank.
pub fn refine_tracks(tracks: &[TrackState], num_frames: usize, cfg: &LoopConfig) -> Vec<TrackRecord> {
    let mut per_frame: Vec<Vec<TrackRecord>> = vec![Vec::new(); num_frames];
    for t in tracks {
        let mut len = t.history.len();
        if cfg.drop_trailing_timeout_predictions && t.status == TrackStatus::Dead {
            while len > 0 && !t.history[len - 1].associated {
                len -= 1;
            }
        }
        if len <= cfg.beta {
            continue;
        }
        for h in &t.history[..len] {
            if h.frame < num_frames {
                let bbox = if cfg.associated_boxes_from_detections {
                    h.observed_or_filtered()
                } else {
                    h.bbox
                };
                per_frame[h.frame].push(TrackRecord {
                    track_id: t.id,
                    frame: h.frame,
                    bbox,
                    score: if h.associated { 1.0 } else { 0.0 },
                });
            }
        }
    }
    let threshold = cfg.refine_nms();
    per_frame
        .into_iter()
        .flat_map(|entries| {
            let keep = nms_indices(
                entries
                    .iter()
                    .map(|r| (&r.bbox, if r.score > 0.0 { 1.0 } else { PREDICTED_PRIORITY })),
                threshold,
            );
            keep.into_iter().map(|i| entries[i]).collect::<Vec<_>>()
        })
        .collect()
}

/// Track entries backed by a detection. Bridging predictions are left out
/// so that tracking scores measure what was actually observed.
pub fn observed_entries(tracks: &[TrackState]) -> Vec<TrackRecord> {
    track_records(tracks).into_iter().filter(|r| r.score > 0.0).collect()
}

/// Per-frame boxes of [`refine_tracks`], identities dropped.
pub fn tracks_to_detections(tracks: &[TrackState], num_frames: usize, cfg: &LoopConfig) -> Vec<Vec<BBox>> {
    records_to_frames(&refine_tracks(tracks, num_frames, cfg), num_frames)
}

fn records_to_frames(records: &[TrackRecord], num_frames: usize) -> Vec<Vec<BBox>> {
    let mut frames = vec![Vec::new(); num_frames];
    for r in records {
        frames[r.frame].push(r.bbox);
    }
    frames
}

/// Replaces the labels with the refined boxes.
pub fn update_pseudo_gt(current: &PseudoGT, refined: Vec<Vec<BBox>>) -> Result<PseudoGT> {
    if current.num_frames() != refined.len() {
        return Err(Error::FrameCountMismatch {
            left: current.num_frames(),
            right: refined.len(),
        });
    }
    Ok(PseudoGT::new(refined))
}

/// Fraction of boxes left unmatched when each frame of `a` and `b` is
/// matched one-to-one at IoU >= 0.5: `(unmatched_a + unmatched_b) / (|a| + |b|)`.
pub fn pseudo_gt_delta(a: &PseudoGT, b: &PseudoGT) -> Result<f64> {
    if a.num_frames() != b.num_frames() {
        return Err(Error::FrameCountMismatch {
            left: a.num_frames(),
            right: b.num_frames(),
        });
    }
    let total = a.total_boxes() + b.total_boxes();
    if total == 0 {
        return Ok(0.0);
    }
    let matched: usize = a
        .frames
        .iter()
        .zip(&b.frames)
        .map(|(x, y)| match_boxes(x, y, 0.5).len())
        .sum();
    Ok((total - 2 * matched) as f64 / total as f64)
}

/// Headline detection numbers for a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub nfp_per_image: f64,
    pub nfn_per_image: f64,
}

impl From<&DetectionMetrics> for DetectionSummary {
    fn from(m: &DetectionMetrics) -> Self {
        Self {
            precision: m.precision,
            recall: m.recall,
            f_measure: m.f_measure,
            nfp_per_image: m.nfp_per_image,
            nfn_per_image: m.nfn_per_image,
        }
    }
}

/// Headline tracking numbers for a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub recall: f64,
    pub mota: f64,
    pub idsw: usize,
    pub mt: usize,
    pub ml: usize,
}

impl From<&MotMetrics> for TrackingSummary {
    fn from(m: &MotMetrics) -> Self {
        Self {
            recall: m.recall,
            mota: m.mota,
            idsw: m.idsw,
            mt: m.mt,
            ml: m.ml,
        }
    }
}

/// What one round of the loop produced. Iteration 0 describes the raw
/// initialization. Metrics are present only when ground truth is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    /// Pseudo-label boxes per frame after this round.
    pub boxes_per_frame: Vec<usize>,
    /// Detector output per frame before tracking.
    pub detections_per_frame: Vec<usize>,
    /// Label change against the previous round; absent for iteration 0.
    pub delta: Option<f64>,
    pub converged: bool,
    /// The round's pseudo labels against ground truth, all frames.
    pub labels: Option<DetectionSummary>,
    pub labels_degraded: Option<DetectionSummary>,
    pub labels_clean: Option<DetectionSummary>,
    /// Raw detector output against ground truth.
    pub detector: Option<DetectionSummary>,
    /// Observed track entries against ground-truth trajectories.
    pub tracking: Option<TrackingSummary>,
}

impl IterationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("# self-training round {}\n", self.iteration);
        out.push_str(&toml::to_string(self).expect("report serializes"));
        out
    }
}

/// Plain whitespace-separated table of per-round headline numbers, one row
/// per report, `nan` where a value is unavailable.
pub fn curves_table(reports: &[IterationReport]) -> String {
    let mut out = String::from(
        "iteration delta boxes precision recall f_measure f_degraded f_clean detector_f mota idsw mt ml\n",
    );
    let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    for r in reports {
        let l = r.labels.as_ref();
        let t = r.tracking.as_ref();
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {}\n",
            r.iteration,
            opt(r.delta),
            r.boxes_per_frame.iter().sum::<usize>(),
            opt(l.map(|m| m.precision)),
            opt(l.map(|m| m.recall)),
            opt(l.map(|m| m.f_measure)),
            opt(r.labels_degraded.map(|m| m.f_measure)),
            opt(r.labels_clean.map(|m| m.f_measure)),
            opt(r.detector.map(|m| m.f_measure)),
            opt(t.map(|m| m.mota)),
            t.map_or_else(|| "nan".into(), |m| m.idsw.to_string()),
            t.map_or_else(|| "nan".into(), |m| m.mt.to_string()),
            t.map_or_else(|| "nan".into(), |m| m.ml.to_string()),
        ));
    }
    out
}

/// Something the loop can train on pseudo labels and run on frames.
pub trait Learner {
    type Model: FiberDetector;

    /// Trains on `labels`, starting from `previous` when there is one.
    fn fit(
        &self,
        frames: &[GrayImage],
        labels: &PseudoGT,
        previous: Option<&Self::Model>,
        iteration: usize,
    ) -> Result<Self::Model>;

    fn save(&self, model: &Self::Model, path: &Path) -> Result<()>;
}

/// The built-in sliding-window detector.
#[derive(Debug, Clone)]
pub struct SlidingWindowLearner {
    pub config: DetectorConfig,
}

impl Learner for SlidingWindowLearner {
    type Model = DetectorModel;

    fn fit(
        &self,
        frames: &[GrayImage],
        labels: &PseudoGT,
        previous: Option<&DetectorModel>,
        iteration: usize,
    ) -> Result<DetectorModel> {
        let cfg = DetectorConfig {
            seed: self.config.seed.wrapping_add(iteration as u64),
            ..self.config.clone()
        };
        train_on_frames(frames, labels, &cfg, previous)
    }

    fn save(&self, model: &DetectorModel, path: &Path) -> Result<()> {
        save_model(model, path)
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutcome<M> {
    /// Final pseudo labels, which double as the final detections.
    pub detections: Vec<Vec<BBox>>,
    /// Every track of the last round, as born.
    pub tracks: Vec<TrackState>,
    /// Tracks of the last round after refinement.
    pub refined_tracks: Vec<TrackRecord>,
    pub model: M,
    pub reports: Vec<IterationReport>,
    pub converged: bool,
}

pub const DETECTIONS_FILE: &str = "detections.txt";
pub const TRACKS_FILE: &str = "tracks.txt";
pub const PSEUDO_GT_FILE: &str = "pseudo_gt.txt";
pub const MODEL_FILE: &str = "model.bin";
pub const REPORT_FILE: &str = "report";

pub fn iteration_dir(out: &Path, iteration: usize) -> PathBuf {
    out.join(format!("iter_{iteration}"))
}

/// Runs the loop with the built-in detector.
pub fn run_self_training(
    dataset: &SequenceDataset,
    cfg: &LoopConfig,
    out_dir: Option<&Path>,
) -> Result<LoopOutcome<DetectorModel>> {
    let learner = SlidingWindowLearner {
        config: cfg.detector.clone(),
    };
    run_with_learner(dataset, cfg, &learner, out_dir)
}

/// Runs the loop with any [`Learner`]. When `out_dir` is given, each round
/// writes `iter_k/{detections.txt, tracks.txt, pseudo_gt.txt, model.bin,
/// report}` there (no model for round 0).
pub fn run_with_learner<L: Learner>(
    dataset: &SequenceDataset,
    cfg: &LoopConfig,
    learner: &L,
    out_dir: Option<&Path>,
) -> Result<LoopOutcome<L::Model>> {
    cfg.validate()?;
    let n = dataset.len();
    if n < cfg.min_frames() {
        return Err(Error::SequenceTooShort {
            frames: n,
            required: cfg.min_frames(),
        });
    }
    let tracker_cfg = cfg
        .tracker
        .clone()
        .with_bounds(f64::from(dataset.width()), f64::from(dataset.height()));
    let ctx = Evaluator::new(dataset, cfg);

    let mut labels = initialize_pseudo_gt(dataset, &cfg.init).map_err(|e| e.in_iteration(0, "init"))?;
    let tracks = track_sequence(&labels.frames, &tracker_cfg).map_err(|e| e.in_iteration(0, "tracker"))?;
    let refined = refine_tracks(&tracks, n, cfg);
    let raw: Vec<Detection> = labels.to_detections();
    let report = ctx.report(0, &labels, &labels.frames, &tracks, None, false)?;
    if let Some(out) = out_dir {
        write_round(out, 0, &raw, &tracks, &labels, None::<(&L, &L::Model)>, &report)?;
    }
    let mut reports = vec![report];

    let mut model: Option<L::Model> = None;
    let mut last_tracks = tracks;
    let mut last_refined = refined;
    let mut converged = false;
    for k in 1..=cfg.max_iterations {
        let m = learner
            .fit(&dataset.frames, &labels, model.as_ref(), k)
            .map_err(|e| e.in_iteration(k, "detector training"))?;
        let detections = detect_all(&m, &dataset.frames);
        let det_boxes: Vec<Vec<BBox>> = detections.iter().map(|d| d.iter().map(|x| x.bbox).collect()).collect();
        let tracks = track_sequence(&det_boxes, &tracker_cfg).map_err(|e| e.in_iteration(k, "tracker"))?;
        let refined = refine_tracks(&tracks, n, cfg);
        let next_frames = if cfg.skip_refinement {
            det_boxes.clone()
        } else {
            records_to_frames(&refined, n)
        };
        let next = update_pseudo_gt(&labels, next_frames)?;
        let delta = pseudo_gt_delta(&labels, &next)?;
        converged = delta < cfg.convergence_epsilon;
        let report = ctx.report(k, &next, &det_boxes, &tracks, Some(delta), converged)?;
        if let Some(out) = out_dir {
            let flat: Vec<Detection> = detections.into_iter().flatten().collect();
            write_round(out, k, &flat, &tracks, &next, Some((learner, &m)), &report)?;
        }
        reports.push(report);
        labels = next;
        model = Some(m);
        last_tracks = tracks;
        last_refined = refined;
        if converged {
            break;
        }
    }

    Ok(LoopOutcome {
        detections: labels.frames,
        tracks: last_tracks,
        refined_tracks: last_refined,
        model: model.expect("at least one iteration runs"),
        reports,
        converged,
    })
}

/// Ground-truth context for the per-round reports.
struct Evaluator<'a> {
    dataset: &'a SequenceDataset,
    gt_boxes: Option<Vec<Vec<BBox>>>,
    gt_records: Option<Vec<TrackRecord>>,
    mot: MotConfig,
}

impl<'a> Evaluator<'a> {
    fn new(dataset: &'a SequenceDataset, cfg: &LoopConfig) -> Self {
        Self {
            dataset,
            gt_boxes: dataset.gt_boxes(),
            gt_records: dataset.gt_records(),
            mot: cfg.evaluation,
        }
    }

    fn report(
        &self,
        iteration: usize,
        labels: &PseudoGT,
        detections: &[Vec<BBox>],
        tracks: &[TrackState],
        delta: Option<f64>,
        converged: bool,
    ) -> Result<IterationReport> {
        let mut r = IterationReport {
            iteration,
            boxes_per_frame: labels.frames.iter().map(Vec::len).collect(),
            detections_per_frame: detections.iter().map(Vec::len).collect(),
            delta,
            converged,
            labels: None,
            labels_degraded: None,
            labels_clean: None,
            detector: None,
            tracking: None,
        };
        if let (Some(gt), Some(gt_rec)) = (&self.gt_boxes, &self.gt_records) {
            let m = detection_metrics(&labels.frames, gt, 0.5)?;
            let clean: Vec<bool> = self.dataset.degraded.iter().map(|d| !d).collect();
            r.labels = Some((&m).into());
            if self.dataset.degraded.iter().any(|&d| d) {
                r.labels_degraded = Some((&m.subset(&self.dataset.degraded)).into());
            }
            if clean.iter().any(|&c| c) {
                r.labels_clean = Some((&m.subset(&clean)).into());
            }
            if iteration > 0 {
                r.detector = Some((&detection_metrics(detections, gt, 0.5)?).into());
            }
            r.tracking = Some((&mot_metrics(&observed_entries(tracks), gt_rec, &self.mot)?).into());
        }
        Ok(r)
    }
}

fn write_round<L: Learner>(
    out: &Path,
    iteration: usize,
    detections: &[Detection],
    tracks: &[TrackState],
    labels: &PseudoGT,
    model: Option<(&L, &L::Model)>,
    report: &IterationReport,
) -> Result<()> {
    let dir = iteration_dir(out, iteration);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_detections(&dir.join(DETECTIONS_FILE), detections)?;
    write_text(&dir.join(TRACKS_FILE), &format_tracks(&[], &track_records(tracks)))?;
    write_detections(&dir.join(PSEUDO_GT_FILE), &labels.to_detections())?;
    if let Some((learner, m)) = model {
        learner.save(m, &dir.join(MODEL_FILE))?;
    }
    write_text(&dir.join(REPORT_FILE), &report.to_text())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Detector output on standalone images, without tracking.
pub fn detect_single_images(model: &dyn FiberDetector, images: &[GrayImage]) -> Vec<Vec<Detection>> {
    detect_all(model, images)
}
