//! Box algebra shared by every stage: boxes, scored detections, IoU, NMS.
//!
//! Coordinates are continuous pixels with the origin at the top-left image
//! corner, x to the right and y down. Pixel `(i, j)` covers the unit square
//! `[i, i+1) x [j, j+1)`, so areas carry no `+1` correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x1, y1)`-`(x2, y2)` with `x1 < x2` and `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Box centered at `(cx, cy)` with the given half extents.
    pub fn from_center(cx: f64, cy: f64, half_w: f64, half_h: f64) -> Result<Self> {
        Self::new(cx - half_w, cy - half_h, cx + half_w, cy + half_h)
    }

    /// Builds a box from two corners that may have crossed (e.g. after an
    /// unconstrained Kalman prediction). Corners are ordered and a minimum
    /// extent of `min_size` is enforced around the midpoint.
    pub fn from_corners_lenient(x1: f64, y1: f64, x2: f64, y2: f64, min_size: f64) -> Self {
        let (mut ax, mut bx) = (x1.min(x2), x1.max(x2));
        let (mut ay, mut by) = (y1.min(y2), y1.max(y2));
        if bx - ax < min_size {
            let c = 0.5 * (ax + bx);
            ax = c - 0.5 * min_size;
            bx = c + 0.5 * min_size;
        }
        if by - ay < min_size {
            let c = 0.5 * (ay + by);
            ay = c - 0.5 * min_size;
            by = c + 0.5 * min_size;
        }
        Self {
            x1: ax,
            y1: ay,
            x2: bx,
            y2: by,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Box shifted by `(dx, dy)`.
    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Clamp to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
        .ok()
    }
}

/// A scored box on one frame of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(frame: usize, bbox: BBox, score: f64) -> Self {
        debug_assert!((0.0..=1.0).contains(&score), "score {score} out of [0,1]");
        Self { frame, bbox, score }
    }
}

/// Per-frame unscored training labels, rewritten on every loop iteration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoGT {
    pub frames: Vec<Vec<BBox>>,
}

impl PseudoGT {
    pub fn new(frames: Vec<Vec<BBox>>) -> Self {
        Self { frames }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn total_boxes(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn mean_area(&self) -> Option<f64> {
        let n = self.total_boxes();
        if n == 0 {
            return None;
        }
        let sum: f64 = self.frames.iter().flatten().map(BBox::area).sum();
        Some(sum / n as f64)
    }

    /// Scored view of the labels (score fixed at 1.0), as persisted on disk.
    pub fn to_detections(&self) -> Vec<Detection> {
        self.frames
            .iter()
            .enumerate()
            .flat_map(|(f, boxes)| boxes.iter().map(move |b| Detection::new(f, *b, 1.0)))
            .collect()
    }
}

/// Intersection over union with the continuous-area convention.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Euclidean distance between box centers.
pub fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Greedy non-maximum suppression.
///
/// Keeps the highest-scoring remaining detection and drops every remaining
/// detection overlapping it with IoU strictly above `threshold`. Equal scores
/// are resolved by input order. Output is sorted by descending score.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    nms_indices(dets.iter().map(|d| (&d.bbox, d.score)), threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Index form of [`nms`] for callers holding boxes and scores separately.
pub fn nms_indices<'a, I>(items: I, threshold: f64) -> Vec<usize>
where
    I: IntoIterator<Item = (&'a BBox, f64)>,
{
    let items: Vec<(&BBox, f64)> = items.into_iter().collect();
    let mut order: Vec<usize> = (0..items.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| items[b].1.total_cmp(&items[a].1));

    let mut suppressed = vec![false; items.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(items[i].0, items[j].0) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
