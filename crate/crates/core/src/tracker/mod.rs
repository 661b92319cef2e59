//! Tracking by detection: a bank of Kalman filters linked to per-frame
//! detections by minimum-distance bipartite matching.
//!
//! Each step predicts every live track, matches predicted boxes to the
//! frame's detections on center distance, and corrects matched tracks.
//! Dummy nodes let a prediction or a detection stay unmatched at a fixed
//! cost, which rejects any pairing farther apart than twice that cost.
//! Unmatched detections start new tracks; a track whose detection is missing
//! carries its prediction forward and dies after `alpha` consecutive misses
//! or when its predicted center leaves the image.

mod hungarian;
pub mod kalman;

use serde::{Deserialize, Serialize};

pub use hungarian::{hungarian, Assignment};
use kalman::{Covariance, State};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, BBox};
use crate::io::TrackRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Cost of leaving a prediction or a detection unmatched, pixels.
    pub dummy_cost: f64,
    /// Consecutive unmatched frames after which a track dies.
    pub alpha: usize,
    pub process_noise: f64,
    pub measurement_noise: f64,
    /// Initial variance of the corner positions of a new track.
    pub initial_position_var: f64,
    /// Initial variance of the corner velocities of a new track.
    pub initial_velocity_var: f64,
    /// Image extent for the boundary death rule; `None` disables it.
    pub image_width: Option<f64>,
    pub image_height: Option<f64>,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            dummy_cost: 100.0,
            alpha: 5,
            process_noise: 1.0,
            measurement_noise: 4.0,
            initial_position_var: 10.0,
            initial_velocity_var: 100.0,
            image_width: None,
            image_height: None,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.dummy_cost,
            self.process_noise,
            self.measurement_noise,
            self.initial_position_var,
            self.initial_velocity_var,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "tracker: dummy_cost and all noise/covariance entries must be positive".into(),
            ));
        }
        if self.alpha == 0 {
            return Err(Error::Config("tracker: alpha must be >= 1".into()));
        }
        Ok(())
    }

    pub fn with_bounds(mut self, width: f64, height: f64) -> Self {
        self.image_width = Some(width);
        self.image_height = Some(height);
        self
    }

    fn initial_covariance(&self) -> Covariance {
        let p = self.initial_position_var;
        let v = self.initial_velocity_var;
        Covariance::from_diagonal(&[p, p, v, v, p, p, v, v].into())
    }

    fn inside(&self, b: &BBox) -> bool {
        let (cx, cy) = b.center();
        let in_x = self.image_width.is_none_or(|w| (0.0..w).contains(&cx));
        let in_y = self.image_height.is_none_or(|h| (0.0..h).contains(&cy));
        in_x && in_y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub frame: usize,
    pub bbox: BBox,
    /// False when the box is a prediction bridging a missing detection.
    pub associated: bool,
    /// The detection the track was associated with, as observed.
    pub detection: Option<BBox>,
}

impl HistoryEntry {
    /// The observed detection when there is one, the filter's box otherwise.
    pub fn observed_or_filtered(&self) -> BBox {
        self.detection.unwrap_or(self.bbox)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub id: u64,
    pub state: State,
    pub covariance: Covariance,
    pub missed: usize,
    pub history: Vec<HistoryEntry>,
    pub status: TrackStatus,
}

impl TrackState {
    fn born(id: u64, frame: usize, bbox: BBox, cfg: &TrackerConfig) -> Self {
        Self {
            id,
            state: kalman::state_from_box(&bbox),
            covariance: cfg.initial_covariance(),
            missed: 0,
            history: vec![HistoryEntry {
                frame,
                bbox,
                associated: true,
                detection: Some(bbox),
            }],
            status: TrackStatus::Active,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == TrackStatus::Active
    }

    pub fn current_box(&self) -> BBox {
        kalman::box_from_state(&self.state)
    }

    pub fn first_frame(&self) -> usize {
        self.history.first().map_or(0, |h| h.frame)
    }

    pub fn last_frame(&self) -> usize {
        self.history.last().map_or(0, |h| h.frame)
    }

    /// Moves the filter one frame ahead.
    pub fn predict(&mut self, q: f64) {
        let (s, p) = kalman::predict(&self.state, &self.covariance, q);
        self.state = s;
        self.covariance = p;
    }

    /// Folds in a measured box.
    pub fn correct(&mut self, z: &BBox, r: f64) -> Result<()> {
        let (s, p) = kalman::correct(&self.state, &self.covariance, &kalman::measurement(z), r)?;
        self.state = s;
        self.covariance = p;
        Ok(())
    }
}

/// Result of [`associate`]: matched `(prediction, detection)` index pairs
/// and the indices left over on each side, all in ascending order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Matches predicted boxes to detections on center distance. The cost
/// matrix is padded to `(n + m)` square with dummy rows and columns: a real
/// node paired with a dummy costs `dummy_cost`, two dummies cost nothing.
pub fn associate(predictions: &[BBox], detections: &[BBox], dummy_cost: f64) -> Association {
    let (n, m) = (predictions.len(), detections.len());
    let size = n + m;
    let mut cost = vec![vec![0.0; size]; size];
    for (i, row) in cost.iter_mut().enumerate() {
        for (j, c) in row.iter_mut().enumerate() {
            *c = match (i < n, j < m) {
                (true, true) => center_distance(&predictions[i], &detections[j]),
                (false, false) => 0.0,
                _ => dummy_cost,
            };
        }
    }
    let assignment = hungarian(&cost);

    let mut out = Association::default();
    let mut det_taken = vec![false; m];
    let mut pred_taken = vec![false; n];
    for &(i, j) in &assignment.pairs {
        if i < n && j < m {
            out.matches.push((i, j));
            pred_taken[i] = true;
            det_taken[j] = true;
        }
    }
    out.unmatched_predictions = (0..n).filter(|&i| !pred_taken[i]).collect();
    out.unmatched_detections = (0..m).filter(|&j| !det_taken[j]).collect();
    out
}

/// Frame-sequential track bank.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    tracks: Vec<TrackState>,
    next_id: u64,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            tracks: Vec::new(),
            next_id: 1,
        })
    }

    pub fn tracks(&self) -> &[TrackState] {
        &self.tracks
    }

    pub fn into_tracks(self) -> Vec<TrackState> {
        self.tracks
    }

    /// Advances the bank to `frame` using that frame's detections.
    pub fn step(&mut self, frame: usize, detections: &[BBox]) -> Result<()> {
        let cfg = &self.cfg;
        let mut live = Vec::new();
        for (k, t) in self.tracks.iter_mut().enumerate() {
            if !t.is_active() {
                continue;
            }
            t.predict(cfg.process_noise);
            if cfg.inside(&t.current_box()) {
                live.push(k);
            } else {
                t.status = TrackStatus::Dead;
            }
        }

        let predicted: Vec<BBox> = live.iter().map(|&k| self.tracks[k].current_box()).collect();
        let assoc = associate(&predicted, detections, cfg.dummy_cost);

        for &(p, d) in &assoc.matches {
            let t = &mut self.tracks[live[p]];
            t.correct(&detections[d], cfg.measurement_noise)?;
            t.missed = 0;
            let bbox = t.current_box();
            t.history.push(HistoryEntry {
                frame,
                bbox,
                associated: true,
                detection: Some(detections[d]),
            });
        }
        for &p in &assoc.unmatched_predictions {
            let t = &mut self.tracks[live[p]];
            t.missed += 1;
            t.history.push(HistoryEntry {
                frame,
                bbox: predicted[p],
                associated: false,
                detection: None,
            });
            if t.missed >= cfg.alpha {
                t.status = TrackStatus::Dead;
            }
        }
        for &d in &assoc.unmatched_detections {
            let track = TrackState::born(self.next_id, frame, detections[d], cfg);
            self.next_id += 1;
            self.tracks.push(track);
        }
        Ok(())
    }
}

/// Runs the tracker over every frame in order and returns all tracks ever
/// born, dead or alive, in birth order.
pub fn track_sequence(detections_per_frame: &[Vec<BBox>], cfg: &TrackerConfig) -> Result<Vec<TrackState>> {
    let mut tracker = Tracker::new(cfg.clone())?;
    for (frame, dets) in detections_per_frame.iter().enumerate() {
        tracker.step(frame, dets)?;
    }
    Ok(tracker.into_tracks())
}

/// Flattens tracks into records: score 1 for associated entries and 0 for
/// bridging predictions. Ordered by track, then frame.
pub fn track_records(tracks: &[TrackState]) -> Vec<TrackRecord> {
    tracks
        .iter()
        .flat_map(|t| {
            t.history.iter().map(move |h| TrackRecord {
                track_id: t.id,
                frame: h.frame,
                bbox: h.bbox,
                score: if h.associated { 1.0 } else { 0.0 },
            })
        })
        .collect()
}
