//! The run configuration file and its command-line overrides.
//!
//! Precedence is flag > `--set` > config file > built-in default. Every
//! section rejects unknown keys.

use std::fs;
use std::path::{Path, PathBuf};

use fibertrack::detector::DetectorConfig;
use fibertrack::evaluation::MotConfig;
use fibertrack::initializer::InitConfig;
use fibertrack::selftrain::LoopConfig;
use fibertrack::synth::SynthConfig;
use fibertrack::tracker::TrackerConfig;
use fibertrack::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the generator, segmentation and detector seeds.
    pub seed: Option<u64>,
    // Placement and parallelism do not change results, so the echoed
    // config leaves them out and stays identical across machines.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
    /// Worker cap for frame-parallel stages; all cores when unset.
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub init: InitConfig,
    pub detector: DetectorConfig,
    pub tracker: TrackerConfig,
    #[serde(rename = "loop")]
    pub self_training: LoopSection,
    pub evaluation: EvaluationSection,
}

/// Loop-only parameters; the component configs live in their own sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSection {
    pub beta: usize,
    pub refine_nms: Option<f64>,
    pub max_iterations: usize,
    pub convergence_epsilon: f64,
    pub drop_trailing_timeout_predictions: bool,
    pub associated_boxes_from_detections: bool,
    pub skip_refinement: bool,
}

impl Default for LoopSection {
    fn default() -> Self {
        let d = LoopConfig::default();
        Self {
            beta: d.beta,
            refine_nms: d.refine_nms,
            max_iterations: d.max_iterations,
            convergence_epsilon: d.convergence_epsilon,
            drop_trailing_timeout_predictions: d.drop_trailing_timeout_predictions,
            associated_boxes_from_detections: d.associated_boxes_from_detections,
            skip_refinement: d.skip_refinement,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// IoU a detection needs with a ground-truth box to count as a hit.
    pub iou_threshold: f64,
    /// Center distance, pixels, for a tracking hit.
    pub hit_threshold: f64,
    pub restrict_to_gt: bool,
    pub mostly_tracked: f64,
    pub mostly_lost: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let m = MotConfig::default();
        Self {
            iou_threshold: 0.5,
            hit_threshold: m.hit_threshold,
            restrict_to_gt: m.restrict_to_gt,
            mostly_tracked: m.mostly_tracked,
            mostly_lost: m.mostly_lost,
        }
    }
}

impl EvaluationSection {
    pub fn mot(&self) -> MotConfig {
        MotConfig {
            hit_threshold: self.hit_threshold,
            restrict_to_gt: self.restrict_to_gt,
            mostly_tracked: self.mostly_tracked,
            mostly_lost: self.mostly_lost,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key.path=value` overrides, then the
    /// seed flag.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if seed.is_some() {
            cfg.seed = seed;
        }
        if let Some(s) = cfg.seed {
            cfg.synth.rng_seed = s;
            cfg.init.segmentation.rng_seed = s;
            cfg.detector.seed = s;
        }
        Ok(cfg)
    }

    pub fn loop_config(&self) -> LoopConfig {
        let s = &self.self_training;
        LoopConfig {
            beta: s.beta,
            refine_nms: s.refine_nms,
            max_iterations: s.max_iterations,
            convergence_epsilon: s.convergence_epsilon,
            drop_trailing_timeout_predictions: s.drop_trailing_timeout_predictions,
            associated_boxes_from_detections: s.associated_boxes_from_detections,
            skip_refinement: s.skip_refinement,
            init: self.init.clone(),
            detector: self.detector.clone(),
            tracker: self.tracker.clone(),
            evaluation: self.evaluation.mot(),
        }
    }

    pub fn to_text(&self) -> String {
        let body = toml::to_string(self).expect("config serializes");
        format!("# resolved fibertrack configuration\n{body}")
    }

    /// Writes the resolved configuration into `dir` as `config.toml`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Sets `a.b.c = value` inside `table`. The value is read as a TOML value
/// and falls back to a plain string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override {spec:?} has an empty key segment")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
