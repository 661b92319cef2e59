//! `fibertrack`: generate synthetic sections, run the detect-track
//! self-training loop, detect with a saved model, evaluate, and render.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 internal error.

mod config;
mod render;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fibertrack::detector::{load_model, save_model};
use fibertrack::evaluation::{detection_metrics, detection_report, mot_metrics, tracking_report, MotConfig};
use fibertrack::initializer::initialize_pseudo_gt;
use fibertrack::io::{read_any, write_detections, write_tracks, AnyRecords};
use fibertrack::selftrain::{
    curves_table, detect_single_images, iteration_dir, run_self_training, DETECTIONS_FILE, MODEL_FILE,
};
use fibertrack::synth::{self, list_frames, load_gray};
use fibertrack::tracker::track_records;
use fibertrack::{BBox, Error};

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fibertrack",
    version,
    about = "Unsupervised fiber detection and tracking in serial-section images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic serial-section sequence with ground truth.
    Synth(PipelineArgs),
    /// Compute the initial pseudo labels of a dataset.
    Init(DatasetArgs),
    /// Run the self-training loop on a dataset.
    Run(DatasetArgs),
    /// Detect fibers in standalone images with a saved model.
    Detect(DetectArgs),
    /// Score detections or tracks against ground truth.
    Eval(EvalArgs),
    /// Draw boxes over dataset frames.
    Render(RenderArgs),
}

#[derive(Args)]
struct PipelineArgs {
    /// Configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set tracker.alpha=6`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed for every randomized stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for frame-parallel stages.
    #[arg(long, env = "FIBERTRACK_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, env = "FIBERTRACK_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DatasetArgs {
    /// Directory holding `frame_*.png` and optionally `gt.txt`.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Args)]
struct DetectArgs {
    /// Saved detector model.
    #[arg(long)]
    model: PathBuf,
    /// Image files, or directories of `frame_*.png`, in frame order.
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Detection file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "FIBERTRACK_THREADS")]
    threads: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Detection,
    Tracking,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted detections or tracks.
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth (detection or track format).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, value_enum, default_value = "detection")]
    mode: EvalMode,
    /// IoU for a detection hit.
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Center distance, pixels, for a tracking hit.
    #[arg(long, default_value_t = 20.0)]
    hit_threshold: f64,
    /// Ignore hypotheses that never come near any ground truth.
    #[arg(long)]
    restrict_to_gt: bool,
    /// Also score bridging predictions (score 0 entries) in tracking mode.
    #[arg(long)]
    include_predicted: bool,
    /// Report file; defaults to the prediction path with a `.report` suffix.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Detections or tracks to draw.
    #[arg(long)]
    input: PathBuf,
    /// Ground truth; when given, false positives and misses are marked.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Init(a) => cmd_init(a),
        Command::Run(a) => cmd_run(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 3 })
        }
    }
}

fn set_threads(threads: Option<usize>) -> CmdResult {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Pipeline(Error::Config(format!("thread pool: {e}"))))?;
    }
    Ok(())
}

/// Resolves the configuration and output directory, and sizes the pool.
fn prepare(p: &PipelineArgs) -> std::result::Result<(RunConfig, PathBuf), Failure> {
    // A configuration that does not resolve is a usage problem.
    let mut cfg =
        RunConfig::load(p.config.as_deref(), &p.overrides, p.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    if p.threads.is_some() {
        cfg.threads = p.threads;
    }
    if p.out.is_some() {
        cfg.out_dir = p.out.clone();
    }
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no output directory: pass --out or set FIBERTRACK_OUT_DIR".into()))?;
    set_threads(cfg.threads)?;
    Ok((cfg, out))
}

fn cmd_synth(a: PipelineArgs) -> CmdResult {
    let (cfg, out) = prepare(&a)?;
    let ds = synth::generate(&cfg.synth)?;
    synth::export(&ds, &out)?;
    cfg.echo_into(&out)?;
    let degraded = ds.degraded_indices();
    println!(
        "wrote {} frames of {}x{} with {} fibers to {}",
        ds.len(),
        ds.width(),
        ds.height(),
        cfg.synth.num_fibers,
        out.display()
    );
    println!("degraded frames: {} {:?}", degraded.len(), degraded);
    Ok(())
}

fn cmd_init(a: DatasetArgs) -> CmdResult {
    let (cfg, out) = prepare(&a.pipeline)?;
    let ds = synth::import(&a.dataset)?;
    let labels = initialize_pseudo_gt(&ds, &cfg.init)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_detections(&out.join("pseudo_gt.txt"), &labels.to_detections())?;
    cfg.echo_into(&out)?;
    println!("{} boxes over {} frames", labels.total_boxes(), labels.num_frames());
    if let Some(gt) = ds.gt_boxes() {
        let m = detection_metrics(&labels.frames, &gt, cfg.evaluation.iou_threshold)?;
        println!(
            "precision {:.4} recall {:.4} f {:.4}",
            m.precision, m.recall, m.f_measure
        );
    }
    Ok(())
}

fn cmd_run(a: DatasetArgs) -> CmdResult {
    let (cfg, out) = prepare(&a.pipeline)?;
    let ds = synth::import(&a.dataset)?;
    let lc = cfg.loop_config();
    println!(
        "fibertrack run: {} frames, init {:?}, alpha={} beta={}, max_iterations={}, epsilon={}",
        ds.len(),
        lc.init.method,
        lc.tracker.alpha,
        lc.beta,
        lc.max_iterations,
        lc.convergence_epsilon
    );
    cfg.echo_into(&out)?;
    let outcome = run_self_training(&ds, &lc, Some(&out))?;
    for r in &outcome.reports {
        let boxes: usize = r.boxes_per_frame.iter().sum();
        let delta = r.delta.map_or_else(|| "-".to_string(), |d| format!("{d:.4}"));
        match &r.labels {
            Some(m) => println!(
                "iteration {}: {} boxes, delta {}, label F {:.4}",
                r.iteration, boxes, delta, m.f_measure
            ),
            None => println!("iteration {}: {} boxes, delta {}", r.iteration, boxes, delta),
        }
    }
    let last = iteration_dir(&out, outcome.reports.len() - 1);
    let (from, to) = (last.join(DETECTIONS_FILE), out.join(DETECTIONS_FILE));
    fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
    write_tracks(&out.join("tracks.txt"), &[], &track_records(&outcome.tracks))?;
    save_model(&outcome.model, &out.join(MODEL_FILE))?;
    let curves = out.join("curves.txt");
    fs::write(&curves, curves_table(&outcome.reports)).map_err(|e| Error::io(&curves, e))?;
    println!(
        "{} after {} iteration(s); artifacts in {}",
        if outcome.converged {
            "converged"
        } else {
            "stopped at the iteration budget"
        },
        outcome.reports.len() - 1,
        out.display()
    );
    Ok(())
}

fn image_paths(inputs: &[PathBuf]) -> fibertrack::Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for p in inputs {
        if p.is_dir() {
            paths.extend(list_frames(p)?);
        } else {
            paths.push(p.clone());
        }
    }
    Ok(paths)
}

fn cmd_detect(a: DetectArgs) -> CmdResult {
    set_threads(a.threads)?;
    let model = load_model(&a.model)?;
    let paths = image_paths(&a.images)?;
    let images = paths
        .iter()
        .map(|p| load_gray(p))
        .collect::<fibertrack::Result<Vec<_>>>()?;
    let dets: Vec<_> = detect_single_images(&model, &images).into_iter().flatten().collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_detections(&a.out, &dets)?;
    println!("{} detections over {} images", dets.len(), images.len());
    Ok(())
}

fn per_frame_boxes(records: &AnyRecords, frames: usize) -> Vec<Vec<BBox>> {
    let mut out = vec![Vec::new(); frames];
    for d in records.to_detections() {
        out[d.frame].push(d.bbox);
    }
    out
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let pred = read_any(&a.pred)?;
    let gt = read_any(&a.gt)?;
    let text = match a.mode {
        EvalMode::Detection => {
            let frames = pred.frame_span().max(gt.frame_span());
            let m = detection_metrics(&per_frame_boxes(&pred, frames), &per_frame_boxes(&gt, frames), a.iou)?;
            detection_report(&m)
        }
        EvalMode::Tracking => {
            let (AnyRecords::Tracks(p), AnyRecords::Tracks(g)) = (&pred, &gt) else {
                return Err(Failure::Usage(
                    "tracking mode needs track files for both --pred and --gt".into(),
                ));
            };
            let p: Vec<_> = p
                .iter()
                .copied()
                .filter(|r| a.include_predicted || r.score > 0.0)
                .collect();
            let cfg = MotConfig {
                hit_threshold: a.hit_threshold,
                restrict_to_gt: a.restrict_to_gt,
                ..MotConfig::default()
            };
            tracking_report(&mot_metrics(&p, g, &cfg)?, &cfg)
        }
    };
    print!("{text}");
    let report = a.report.unwrap_or_else(|| default_report_path(&a.pred));
    fs::write(&report, &text).map_err(|e| Error::io(&report, e))?;
    Ok(())
}

fn default_report_path(pred: &Path) -> PathBuf {
    let mut name = pred.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".report");
    pred.with_file_name(name)
}

fn cmd_render(a: RenderArgs) -> CmdResult {
    let records = read_any(&a.input)?;
    let truth = a.gt.as_deref().map(read_any).transpose()?;
    let n = render::render_dataset(&a.dataset, &records, truth.as_ref(), a.iou, &a.out)?;
    println!("rendered {n} frames into {}", a.out.display());
    Ok(())
}
