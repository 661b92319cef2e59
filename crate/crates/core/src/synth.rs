//! Synthetic serial-section sequences with exact ground truth.
//!
//! Every fiber is a near-vertical tube crossing all slices: a start center,
//! a constant drift velocity and a small smooth wobble. Its cross-section is
//! a dark filled ellipse on a bright matrix. A chosen subset of frames gets
//! local degradations (soft dark stains and defocus blur discs). Ground truth
//! is the analytic bounding box of each rendered ellipse and is kept even
//! where a degradation hides the fiber.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::initializer::{min_bbox, Ellipse};
use crate::io::{self, TrackRecord};
use crate::raster::Plane;

/// Generator parameters. Defaults are the desk-scale profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub num_frames: usize,
    pub num_fibers: usize,
    pub mean_radius: f64,
    pub radius_sd: f64,
    /// Upper bound on the norm of each fiber's drift, pixels per frame.
    pub max_drift_velocity: f64,
    pub degradation_frame_fraction: f64,
    /// Frames per contiguous run of degraded frames (a contaminant or a
    /// focus problem persists over neighbouring slices).
    pub degradation_run_length: usize,
    pub blur_disc_radius_range: [f64; 2],
    pub stain_blob_radius_range: [f64; 2],
    /// Darkening at the core of a stain, gray levels.
    pub stain_intensity_offset: f64,
    pub noise_sd: f64,
    pub min_center_separation: f64,
    pub background_level: f64,
    pub fiber_level: f64,
    /// Largest fiber tilt from the slicing normal, degrees; the section's
    /// major axis is `r / cos(tilt)`.
    pub max_tilt_deg: f64,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            num_frames: 25,
            num_fibers: 40,
            mean_radius: 6.0,
            radius_sd: 0.6,
            max_drift_velocity: 1.0,
            degradation_frame_fraction: 0.3,
            degradation_run_length: 2,
            blur_disc_radius_range: [50.0, 90.0],
            stain_blob_radius_range: [50.0, 90.0],
            stain_intensity_offset: 80.0,
            noise_sd: 8.0,
            min_center_separation: 14.0,
            background_level: 190.0,
            fiber_level: 80.0,
            max_tilt_deg: 35.0,
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.width == 0 || self.height == 0 || self.num_frames == 0 {
            return bad("width, height and num_frames must be positive");
        }
        if !(self.mean_radius > 0.0) || self.radius_sd < 0.0 {
            return bad("mean_radius must be positive and radius_sd non-negative");
        }
        if !(0.0..=1.0).contains(&self.degradation_frame_fraction) {
            return bad("degradation_frame_fraction must lie in [0, 1]");
        }
        if self.max_drift_velocity < 0.0 || self.noise_sd < 0.0 {
            return bad("max_drift_velocity and noise_sd must be non-negative");
        }
        if self.min_center_separation < 2.0 * self.mean_radius {
            return bad("min_center_separation must be at least 2 * mean_radius");
        }
        for (name, r) in [
            ("blur_disc_radius_range", self.blur_disc_radius_range),
            ("stain_blob_radius_range", self.stain_blob_radius_range),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad(&format!("{name} must satisfy 0 < low <= high"));
            }
        }
        if self.degradation_run_length == 0 {
            return bad("degradation_run_length must be at least 1");
        }
        if !(0.0..90.0).contains(&self.max_tilt_deg) {
            return bad("max_tilt_deg must lie in [0, 90)");
        }
        Ok(())
    }

    /// Number of degraded frames: the fraction of the sequence, rounded.
    pub fn degraded_frame_count(&self) -> usize {
        (self.degradation_frame_fraction * self.num_frames as f64).round() as usize
    }
}

/// Ground-truth box of one fiber on one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub fiber_id: u64,
    pub bbox: BBox,
}

/// An ordered image sequence with optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub frames: Vec<GrayImage>,
    /// Per-frame ground truth; `None` for unannotated data.
    pub gt: Option<Vec<Vec<GtBox>>>,
    pub degraded: Vec<bool>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.frames.first().map_or(0, GrayImage::width)
    }

    pub fn height(&self) -> u32 {
        self.frames.first().map_or(0, GrayImage::height)
    }

    /// Ground-truth boxes per frame without identities.
    pub fn gt_boxes(&self) -> Option<Vec<Vec<BBox>>> {
        self.gt
            .as_ref()
            .map(|g| g.iter().map(|f| f.iter().map(|b| b.bbox).collect()).collect())
    }

    /// Ground truth as track records (score 1).
    pub fn gt_records(&self) -> Option<Vec<TrackRecord>> {
        self.gt.as_ref().map(|g| {
            let mut recs: Vec<TrackRecord> = g
                .iter()
                .enumerate()
                .flat_map(|(frame, boxes)| {
                    boxes.iter().map(move |b| TrackRecord {
                        track_id: b.fiber_id,
                        frame,
                        bbox: b.bbox,
                        score: 1.0,
                    })
                })
                .collect();
            recs.sort_by_key(|r| (r.track_id, r.frame));
            recs
        })
    }

    pub fn degraded_indices(&self) -> Vec<usize> {
        (0..self.degraded.len()).filter(|&i| self.degraded[i]).collect()
    }
}

#[derive(Debug, Clone)]
struct Fiber {
    start: (f64, f64),
    velocity: (f64, f64),
    wobble_amp: (f64, f64),
    wobble_period: (f64, f64),
    wobble_phase: (f64, f64),
    radius: f64,
    tilt: f64,
    theta: f64,
}

impl Fiber {
    fn center(&self, t: f64) -> (f64, f64) {
        let wx = self.wobble_amp.0
            * ((2.0 * PI * t / self.wobble_period.0 + self.wobble_phase.0).sin() - self.wobble_phase.0.sin());
        let wy = self.wobble_amp.1
            * ((2.0 * PI * t / self.wobble_period.1 + self.wobble_phase.1).sin() - self.wobble_phase.1.sin());
        (
            self.start.0 + self.velocity.0 * t + wx,
            self.start.1 + self.velocity.1 * t + wy,
        )
    }

    fn semi_major(&self) -> f64 {
        self.radius / self.tilt.cos()
    }

    fn ellipse(&self, t: f64) -> Ellipse {
        let (cx, cy) = self.center(t);
        Ellipse::new(cx, cy, self.semi_major(), self.radius, self.theta)
    }
}

/// Per-frame step bound of the wobble, as a fraction of the drift bound;
/// keeps `|step| <= max_drift_velocity * sqrt(2)`.
const WOBBLE_STEP_FRACTION: f64 = 0.35;
const WOBBLE_MIN_PERIOD: f64 = 12.0;
const PLACEMENT_ATTEMPTS_PER_FIBER: usize = 2000;

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates a sequence. Deterministic in `config.rng_seed`.
pub fn generate(config: &SynthConfig) -> Result<SequenceDataset> {
    config.validate()?;
    let mut rng = frame_rng(config.rng_seed, 0);
    let fibers = place_fibers(config, &mut rng)?;
    let degraded = pick_degraded_frames(config, &mut rng);

    let rendered: Vec<(GrayImage, Vec<GtBox>)> = (0..config.num_frames)
        .into_par_iter()
        .map(|t| render_frame(config, &fibers, t, degraded[t]))
        .collect();
    let (frames, gt): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    Ok(SequenceDataset {
        frames,
        gt: Some(gt),
        degraded,
    })
}

fn place_fibers(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Fiber>> {
    let vmax = config.max_drift_velocity;
    // Fibers in a ply are roughly parallel: a shared drift plus individual
    // deviations keeps relative motion small.
    let shared_angle = rng.random_range(0.0..2.0 * PI);
    let shared_speed = rng.random_range(0.0..=0.6 * vmax);
    let shared = (shared_speed * shared_angle.cos(), shared_speed * shared_angle.sin());
    let radius_dist =
        Normal::new(config.mean_radius, config.radius_sd.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    let last_t = (config.num_frames - 1) as f64;
    let max_tilt = config.max_tilt_deg.to_radians();
    let wobble_amp = WOBBLE_STEP_FRACTION * vmax * WOBBLE_MIN_PERIOD / (2.0 * PI * 2f64.sqrt());

    let mut fibers: Vec<Fiber> = Vec::with_capacity(config.num_fibers);
    // Sampled trajectories, for the separation test.
    let mut paths: Vec<Vec<(f64, f64)>> = Vec::with_capacity(config.num_fibers);
    for index in 0..config.num_fibers {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS_PER_FIBER {
            let radius = radius_dist
                .sample(rng)
                .clamp(0.6 * config.mean_radius, 1.4 * config.mean_radius);
            let dev_angle = rng.random_range(0.0..2.0 * PI);
            let dev_speed = rng.random_range(0.0..=0.4 * vmax);
            let mut velocity = (
                shared.0 + dev_speed * dev_angle.cos(),
                shared.1 + dev_speed * dev_angle.sin(),
            );
            let speed = velocity.0.hypot(velocity.1);
            if speed > vmax && speed > 0.0 {
                velocity = (velocity.0 * vmax / speed, velocity.1 * vmax / speed);
            }
            let fiber = Fiber {
                start: (
                    rng.random_range(0.0..config.width as f64),
                    rng.random_range(0.0..config.height as f64),
                ),
                velocity,
                wobble_amp: (wobble_amp, wobble_amp),
                wobble_period: (
                    rng.random_range(WOBBLE_MIN_PERIOD..2.0 * WOBBLE_MIN_PERIOD),
                    rng.random_range(WOBBLE_MIN_PERIOD..2.0 * WOBBLE_MIN_PERIOD),
                ),
                wobble_phase: (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)),
                radius,
                tilt: rng.random_range(0.0..=max_tilt),
                theta: rng.random_range(0.0..PI),
            };
            let margin = fiber.semi_major() + 2.0;
            let path: Vec<(f64, f64)> = (0..config.num_frames).map(|t| fiber.center(t as f64)).collect();
            let inside = path.iter().all(|&(x, y)| {
                x >= margin && y >= margin && x <= config.width as f64 - margin && y <= config.height as f64 - margin
            });
            if !inside {
                continue;
            }
            let separated = fibers.iter().zip(&paths).all(|(other, other_path)| {
                let need = config
                    .min_center_separation
                    .max(fiber.semi_major() + other.semi_major() + 1.0);
                path.iter()
                    .zip(other_path)
                    .all(|(p, q)| (p.0 - q.0).hypot(p.1 - q.1) >= need)
            });
            if separated {
                fibers.push(fiber);
                paths.push(path);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Synthesis(format!(
                "could only place {index} of {} fibers with separation {} px in {}x{} (last frame {last_t})",
                config.num_fibers, config.min_center_separation, config.width, config.height
            )));
        }
    }
    Ok(fibers)
}

/// Picks exactly `degraded_frame_count` frames, grouped in contiguous runs.
fn pick_degraded_frames(config: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = config.num_frames;
    let want = config.degraded_frame_count().min(n);
    let mut flags = vec![false; n];
    let run = config.degradation_run_length.max(1);
    let mut count = 0;
    let mut starts: Vec<usize> = (0..n).collect();
    starts.shuffle(rng);
    for s in starts {
        if count >= want {
            break;
        }
        for t in s..(s + run).min(n) {
            if count < want && !flags[t] {
                flags[t] = true;
                count += 1;
            }
        }
    }
    flags
}

/// Soft disc profile: 1 inside half the radius, cosine roll-off to 0 at `r`.
fn soft_disc(d: f64, r: f64) -> f64 {
    let inner = 0.5 * r;
    if d <= inner {
        1.0
    } else if d >= r {
        0.0
    } else {
        0.5 * (1.0 + (PI * (d - inner) / (r - inner)).cos())
    }
}

fn render_frame(config: &SynthConfig, fibers: &[Fiber], t: usize, degraded: bool) -> (GrayImage, Vec<GtBox>) {
    let mut rng = frame_rng(config.rng_seed, 1 + t as u64);
    let (w, h) = (config.width, config.height);
    let mut plane = Plane::filled(w, h, config.background_level);
    let contrast = config.fiber_level - config.background_level;
    const SS: usize = 4;

    let mut gt = Vec::with_capacity(fibers.len());
    for (id, fiber) in fibers.iter().enumerate() {
        let e = fiber.ellipse(t as f64);
        let bbox = min_bbox(&e);
        gt.push(GtBox {
            fiber_id: id as u64,
            bbox,
        });
        let x0 = bbox.x1.floor().max(0.0) as usize;
        let y0 = bbox.y1.floor().max(0.0) as usize;
        let x1 = (bbox.x2.ceil() as usize).min(w);
        let y1 = (bbox.y2.ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut inside = 0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                        if e.contains(px, py) {
                            inside += 1;
                        }
                    }
                }
                if inside > 0 {
                    let cov = inside as f64 / (SS * SS) as f64;
                    let v = plane.get(x, y) + cov * contrast;
                    plane.set(x, y, v);
                }
            }
        }
    }

    if degraded {
        let events = rng.random_range(1..=3);
        for _ in 0..events {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            if rng.random_bool(0.5) {
                let [lo, hi] = config.stain_blob_radius_range;
                let r = rng.random_range(lo..=hi);
                for y in 0..h {
                    for x in 0..w {
                        let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                        let m = soft_disc(d, r);
                        if m > 0.0 {
                            let v = plane.get(x, y) - config.stain_intensity_offset * m;
                            plane.set(x, y, v);
                        }
                    }
                }
            } else {
                let [lo, hi] = config.blur_disc_radius_range;
                let r = rng.random_range(lo..=hi);
                let blurred = plane.gaussian_blur(r / 8.0);
                for y in 0..h {
                    for x in 0..w {
                        let d = (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy);
                        let m = soft_disc(d, r);
                        if m > 0.0 {
                            let v = (1.0 - m) * plane.get(x, y) + m * blurred.get(x, y);
                            plane.set(x, y, v);
                        }
                    }
                }
            }
        }
    }

    if config.noise_sd > 0.0 {
        let noise = Normal::new(0.0, config.noise_sd).expect("finite noise sd");
        for v in plane.data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    (plane.to_gray(), gt)
}

pub const GT_FILE: &str = "gt.txt";

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Writes frames as `frame_%04d.png` plus `gt.txt` (when ground truth is
/// present). The degraded-frame list is kept in a header comment of the
/// ground-truth file.
pub fn export(dataset: &SequenceDataset, directory: &Path) -> Result<()> {
    if directory.as_os_str().is_empty() {
        return Err(Error::io(
            directory,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty output directory path"),
        ));
    }
    fs::create_dir_all(directory).map_err(|e| Error::io(directory, e))?;
    for (i, frame) in dataset.frames.iter().enumerate() {
        let path = directory.join(frame_file_name(i));
        frame
            .save_with_format(&path, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path, source })?;
    }
    let degraded: Vec<String> = dataset.degraded_indices().iter().map(usize::to_string).collect();
    let comments = vec![
        format!("frames={}", dataset.len()),
        format!("degraded={}", degraded.join(" ")),
    ];
    let records = dataset.gt_records().unwrap_or_default();
    if dataset.gt.is_some() {
        io::write_tracks(&directory.join(GT_FILE), &comments, &records)?;
    } else {
        let path = directory.join("frames.txt");
        fs::write(&path, comments.iter().map(|c| format!("# {c}\n")).collect::<String>())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Sorted `frame_*.png` files in a directory.
pub fn list_frames(directory: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(directory).map_err(|e| Error::io(directory, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(directory, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("frame_") && name.ends_with(".png") {
            paths.push(entry.path());
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    image::open(path)
        .map(|img| img.to_luma8())
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Reads a dataset written by [`export`]. The ground-truth file is optional.
pub fn import(directory: &Path) -> Result<SequenceDataset> {
    let paths = list_frames(directory)?;
    if paths.is_empty() {
        return Err(Error::io(
            directory,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no frame_*.png files"),
        ));
    }
    let frames = paths.iter().map(|p| load_gray(p)).collect::<Result<Vec<_>>>()?;
    let n = frames.len();
    let mut degraded = vec![false; n];
    let gt_path = directory.join(GT_FILE);
    let mut gt = None;
    let comments = if gt_path.exists() {
        let file = io::read_tracks(&gt_path)?;
        let mut per_frame: Vec<Vec<GtBox>> = vec![Vec::new(); n];
        for r in &file.records {
            let slot = per_frame.get_mut(r.frame).ok_or_else(|| Error::Parse {
                path: gt_path.clone(),
                line: 0,
                message: format!("frame {} beyond the {n} images present", r.frame),
            })?;
            slot.push(GtBox {
                fiber_id: r.track_id,
                bbox: r.bbox,
            });
        }
        for f in per_frame.iter_mut() {
            f.sort_by_key(|b| b.fiber_id);
        }
        gt = Some(per_frame);
        file.comments
    } else {
        let meta = directory.join("frames.txt");
        if meta.exists() {
            io::read_detections(&meta)?.comments
        } else {
            Vec::new()
        }
    };
    for c in comments {
        if let Some(list) = c.strip_prefix("degraded=") {
            for tok in list.split_whitespace() {
                let i: usize = tok.parse().map_err(|_| Error::Parse {
                    path: gt_path.clone(),
                    line: 0,
                    message: format!("bad degraded frame index {tok:?}"),
                })?;
                if i < n {
                    degraded[i] = true;
                }
            }
        }
    }
    Ok(SequenceDataset { frames, gt, degraded })
}
