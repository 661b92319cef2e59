//! Line-oriented record files.
//!
//! Detection files hold one `frame,x1,y1,x2,y2,score` record per line.
//! Track files prepend a `track_id` field. Lines starting with `#` are
//! comments; blank lines are ignored. Numbers are written in their shortest
//! round-trip form, so a write/read cycle is lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};

/// One entry of a track file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub track_id: u64,
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Parsed contents of a record file: leading comment text plus records.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RecordFile<T> {
    /// Comment lines without the leading `#` and surrounding whitespace.
    pub comments: Vec<String>,
    pub records: Vec<T>,
}

pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::with_capacity(dets.len() * 48);
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(out, "{},{},{},{},{},{}", d.frame, b.x1, b.y1, b.x2, b.y2, d.score);
    }
    out
}

pub fn format_tracks(comments: &[String], records: &[TrackRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 52);
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    for r in records {
        let b = &r.bbox;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.track_id, r.frame, b.x1, b.y1, b.x2, b.y2, r.score
        );
    }
    out
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

pub fn write_tracks(path: &Path, comments: &[String], records: &[TrackRecord]) -> Result<()> {
    fs::write(path, format_tracks(comments, records)).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<RecordFile<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(path, &text, 6, |f| {
        let frame = parse_field::<usize>(f[0], "frame")?;
        let bbox = parse_box(&f[1..5])?;
        let score = parse_score(f[5])?;
        Ok(Detection { frame, bbox, score })
    })
}

pub fn read_tracks(path: &Path) -> Result<RecordFile<TrackRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_records(path, &text, 7, |f| {
        let track_id = parse_field::<u64>(f[0], "track_id")?;
        let frame = parse_field::<usize>(f[1], "frame")?;
        let bbox = parse_box(&f[2..6])?;
        let score = parse_score(f[6])?;
        Ok(TrackRecord {
            track_id,
            frame,
            bbox,
            score,
        })
    })
}

/// Contents of a file that may be in either record format.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyRecords {
    Detections(Vec<Detection>),
    Tracks(Vec<TrackRecord>),
}

impl AnyRecords {
    /// Records as detections; track entries keep their frame, box, and score.
    pub fn to_detections(&self) -> Vec<Detection> {
        match self {
            AnyRecords::Detections(d) => d.clone(),
            AnyRecords::Tracks(t) => t.iter().map(|r| Detection::new(r.frame, r.bbox, r.score)).collect(),
        }
    }

    /// One past the largest frame index, 0 when empty.
    pub fn frame_span(&self) -> usize {
        let last = match self {
            AnyRecords::Detections(d) => d.iter().map(|x| x.frame).max(),
            AnyRecords::Tracks(t) => t.iter().map(|x| x.frame).max(),
        };
        last.map_or(0, |f| f + 1)
    }
}

/// Reads a detection or track file, telling them apart by the field count
/// of the first record. A file with no records reads as empty detections.
pub fn read_any(path: &Path) -> Result<AnyRecords> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'));
    match first.map(|l| l.split(',').count()) {
        Some(7) => Ok(AnyRecords::Tracks(read_tracks(path)?.records)),
        _ => Ok(AnyRecords::Detections(read_detections(path)?.records)),
    }
}

/// Groups detections by frame, keeping file order within a frame.
/// Detections at or beyond `num_frames` are an error.
pub fn group_by_frame(dets: &[Detection], num_frames: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); num_frames];
    for d in dets {
        let slot = out.get_mut(d.frame).ok_or(Error::FrameCountMismatch {
            left: d.frame + 1,
            right: num_frames,
        })?;
        slot.push(*d);
    }
    Ok(out)
}

fn parse_records<T>(
    path: &Path,
    text: &str,
    arity: usize,
    parse: impl Fn(&[&str]) -> std::result::Result<T, String>,
) -> Result<RecordFile<T>> {
    let mut file = RecordFile {
        comments: Vec::new(),
        records: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            file.comments.push(c.trim().to_string());
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if fields.len() != arity {
            return Err(err(format!(
                "expected {arity} comma-separated fields, found {}",
                fields.len()
            )));
        }
        file.records.push(parse(&fields).map_err(err)?);
    }
    Ok(file)
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|_| format!("cannot parse {name} from {s:?}"))
}

fn parse_box(f: &[&str]) -> std::result::Result<BBox, String> {
    let x1 = parse_field::<f64>(f[0], "x1")?;
    let y1 = parse_field::<f64>(f[1], "y1")?;
    let x2 = parse_field::<f64>(f[2], "x2")?;
    let y2 = parse_field::<f64>(f[3], "y2")?;
    BBox::new(x1, y1, x2, y2).map_err(|e| e.to_string())
}

fn parse_score(s: &str) -> std::result::Result<f64, String> {
    let v = parse_field::<f64>(s, "score")?;
    if !(0.0..=1.0).contains(&v) {
        return Err(format!("score {v} outside [0, 1]"));
    }
    Ok(v)
}
