//! Box overlays on dataset frames.

use std::fs;
use std::path::Path;

use fibertrack::evaluation::match_boxes;
use fibertrack::io::AnyRecords;
use fibertrack::synth::{frame_file_name, list_frames, load_gray};
use fibertrack::{BBox, Error, Result};
use image::{GrayImage, Rgb, RgbImage};

pub const GREEN: Rgb<u8> = Rgb([0, 200, 0]);
/// False positives in compare mode.
pub const RED: Rgb<u8> = Rgb([230, 30, 30]);
/// Missed ground truth in compare mode.
pub const BLUE: Rgb<u8> = Rgb([40, 80, 255]);

/// What gets drawn on one frame.
pub enum Overlay {
    Plain(Vec<BBox>),
    Tracks(Vec<(u64, BBox)>),
    Compare {
        truth: Vec<BBox>,
        pred: Vec<BBox>,
        iou: f64,
    },
}

pub fn to_rgb(gray: &GrayImage) -> RgbImage {
    RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y)[0];
        Rgb([v, v, v])
    })
}

/// One-pixel rectangle outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = b.x1.floor() as i64;
    let y1 = b.y1.floor() as i64;
    let x2 = (b.x2.ceil() as i64 - 1).max(x1);
    let y2 = (b.y2.ceil() as i64 - 1).max(y1);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

/// A stable, well-spread color for a track id (golden-angle hue walk).
pub fn track_color(id: u64) -> Rgb<u8> {
    let hue = (id as f64 * 137.507_764) % 360.0;
    let (s, v) = (0.85, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to = |u: f64| ((u + m) * 255.0).round() as u8;
    Rgb([to(r), to(g), to(b)])
}

pub fn render_frame(gray: &GrayImage, overlay: &Overlay) -> RgbImage {
    let mut img = to_rgb(gray);
    match overlay {
        Overlay::Plain(boxes) => {
            for b in boxes {
                draw_box(&mut img, b, GREEN);
            }
        }
        Overlay::Tracks(entries) => {
            for (id, b) in entries {
                draw_box(&mut img, b, track_color(*id));
            }
        }
        Overlay::Compare { truth, pred, iou } => {
            let matched = match_boxes(pred, truth, *iou);
            for (i, b) in pred.iter().enumerate() {
                let hit = matched.iter().any(|m| m.0 == i);
                draw_box(&mut img, b, if hit { GREEN } else { RED });
            }
            for (j, b) in truth.iter().enumerate() {
                if !matched.iter().any(|m| m.1 == j) {
                    draw_box(&mut img, b, BLUE);
                }
            }
        }
    }
    img
}

/// Per-frame overlays for `records`, compared against `truth` when given.
pub fn overlays(records: &AnyRecords, truth: Option<&AnyRecords>, frames: usize, iou: f64) -> Vec<Overlay> {
    let per_frame = |r: &AnyRecords| {
        let mut out = vec![Vec::new(); frames];
        for d in r.to_detections() {
            if let Some(slot) = out.get_mut(d.frame) {
                slot.push(d.bbox);
            }
        }
        out
    };
    match (truth, records) {
        (Some(t), _) => per_frame(t)
            .into_iter()
            .zip(per_frame(records))
            .map(|(truth, pred)| Overlay::Compare { truth, pred, iou })
            .collect(),
        (None, AnyRecords::Tracks(t)) => {
            let mut out = vec![Vec::new(); frames];
            for r in t {
                if let Some(slot) = out.get_mut(r.frame) {
                    slot.push((r.track_id, r.bbox));
                }
            }
            out.into_iter().map(Overlay::Tracks).collect()
        }
        (None, AnyRecords::Detections(_)) => per_frame(records).into_iter().map(Overlay::Plain).collect(),
    }
}

/// Renders every `frame_*.png` of `dataset` with its overlay into `out`.
/// Returns the number of frames written.
pub fn render_dataset(
    dataset: &Path,
    records: &AnyRecords,
    truth: Option<&AnyRecords>,
    iou: f64,
    out: &Path,
) -> Result<usize> {
    let paths = list_frames(dataset)?;
    let frames = overlays(records, truth, paths.len(), iou);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (i, (path, overlay)) in paths.iter().zip(&frames).enumerate() {
        let img = render_frame(&load_gray(path)?, overlay);
        let target = out.join(frame_file_name(i));
        img.save_with_format(&target, image::ImageFormat::Png)
            .map_err(|source| Error::Image { path: target, source })?;
    }
    Ok(paths.len())
}
