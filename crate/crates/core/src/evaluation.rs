//! Detection and tracking metrics.
//!
//! Detection: per frame, the largest one-to-one matching between predicted
//! and true boxes over pairs with IoU at or above the threshold (ties broken
//! by total IoU). Tracking: CLEAR-MOT with center-distance hits, keeping last
//! frame's correspondences while they stay within the hit threshold.
//! Tracking recall is position-level: matched GT positions over all GT
//! positions.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, BBox};
use crate::io::TrackRecord;
use crate::tracker::hungarian;

/// Maximum-cardinality, then minimum-cost, one-to-one matching.
///
/// `cost[i][j]` is `Some(c)` with `0 <= c <= max_cost` for admissible pairs
/// and `None` otherwise. Returns `(row, col)` pairs in row order.
pub fn max_matching(cost: &[Vec<Option<f64>>], cols: usize, max_cost: f64) -> Vec<(usize, usize)> {
    let rows = cost.len();
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    // Leaving a node unmatched must cost more than any admissible cost
    // saving elsewhere, so cardinality dominates.
    let dummy = max_cost * rows.min(cols) as f64 + 1.0;
    let forbidden = 4.0 * dummy;
    let size = rows + cols;
    let mut padded = vec![vec![0.0; size]; size];
    for (i, line) in padded.iter_mut().enumerate() {
        for (j, c) in line.iter_mut().enumerate() {
            *c = match (i < rows, j < cols) {
                (true, true) => cost[i][j].unwrap_or(forbidden),
                (false, false) => 0.0,
                _ => dummy,
            };
        }
    }
    hungarian(&padded)
        .pairs
        .into_iter()
        .filter(|&(i, j)| i < rows && j < cols && cost[i][j].is_some())
        .collect()
}

/// Largest IoU matching between two box sets at `threshold`.
pub fn match_boxes(pred: &[BBox], truth: &[BBox], threshold: f64) -> Vec<(usize, usize)> {
    let cost: Vec<Vec<Option<f64>>> = pred
        .iter()
        .map(|p| {
            truth
                .iter()
                .map(|t| {
                    let v = iou(p, t);
                    (v >= threshold).then_some(1.0 - v)
                })
                .collect()
        })
        .collect();
    max_matching(&cost, truth.len(), 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FrameCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub frames: usize,
    pub nfp_per_image: f64,
    pub nfn_per_image: f64,
    pub per_frame: Vec<FrameCounts>,
}

/// `2PR / (P + R)`, or 0 when both are 0.
pub fn f_measure(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

impl DetectionMetrics {
    pub fn from_counts(per_frame: Vec<FrameCounts>) -> Self {
        let tp: usize = per_frame.iter().map(|c| c.tp).sum();
        let fp: usize = per_frame.iter().map(|c| c.fp).sum();
        let fn_: usize = per_frame.iter().map(|c| c.fn_).sum();
        // empty prediction or truth sets count as perfect on that axis
        let precision = if tp + fp == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let frames = per_frame.len();
        let per_image = |n: usize| if frames == 0 { 0.0 } else { n as f64 / frames as f64 };
        Self {
            precision,
            recall,
            f_measure: f_measure(precision, recall),
            tp,
            fp,
            fn_,
            frames,
            nfp_per_image: per_image(fp),
            nfn_per_image: per_image(fn_),
            per_frame,
        }
    }

    /// Metrics restricted to the frames where `keep` is true.
    pub fn subset(&self, keep: &[bool]) -> Self {
        let counts = self
            .per_frame
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(c, _)| *c)
            .collect();
        Self::from_counts(counts)
    }
}

pub fn detection_metrics(dets: &[Vec<BBox>], gt: &[Vec<BBox>], iou_threshold: f64) -> Result<DetectionMetrics> {
    if dets.len() != gt.len() {
        return Err(Error::FrameCountMismatch {
            left: dets.len(),
            right: gt.len(),
        });
    }
    let per_frame = dets
        .iter()
        .zip(gt)
        .map(|(d, g)| {
            let tp = match_boxes(d, g, iou_threshold).len();
            FrameCounts {
                tp,
                fp: d.len() - tp,
                fn_: g.len() - tp,
            }
        })
        .collect();
    Ok(DetectionMetrics::from_counts(per_frame))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotConfig {
    /// Largest center distance counted as a hit, pixels.
    pub hit_threshold: f64,
    /// Ignore hypotheses that never come within the threshold of any GT
    /// position (for partially annotated sequences).
    pub restrict_to_gt: bool,
    /// Hit-rate bounds for mostly tracked / mostly lost trajectories.
    pub mostly_tracked: f64,
    pub mostly_lost: f64,
}

impl Default for MotConfig {
    fn default() -> Self {
        Self {
            hit_threshold: 20.0,
            restrict_to_gt: false,
            mostly_tracked: 0.8,
            mostly_lost: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MotFrame {
    pub gt: usize,
    pub matches: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub idsw: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotMetrics {
    pub recall: f64,
    pub mota: f64,
    pub idsw: usize,
    pub mt: usize,
    pub ml: usize,
    pub gt_trajectories: usize,
    pub gt_positions: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_frame: Vec<MotFrame>,
}

impl MotMetrics {
    /// `1 - (FN + FP + IDSW) / GT`, from a per-frame breakdown.
    pub fn mota_from_frames(frames: &[MotFrame]) -> f64 {
        let gt: usize = frames.iter().map(|f| f.gt).sum();
        let errors: usize = frames.iter().map(|f| f.fn_ + f.fp + f.idsw).sum();
        if gt == 0 {
            if errors == 0 {
                1.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            1.0 - errors as f64 / gt as f64
        }
    }
}

/// Records of one frame keyed by id; errors on a repeated id.
fn index_by_frame(records: &[TrackRecord]) -> Result<BTreeMap<usize, BTreeMap<u64, BBox>>> {
    let mut out: BTreeMap<usize, BTreeMap<u64, BBox>> = BTreeMap::new();
    for r in records {
        if out.entry(r.frame).or_default().insert(r.track_id, r.bbox).is_some() {
            return Err(Error::DuplicateTrackEntry {
                track: r.track_id,
                frame: r.frame,
            });
        }
    }
    Ok(out)
}

pub fn mot_metrics(tracks: &[TrackRecord], gt: &[TrackRecord], cfg: &MotConfig) -> Result<MotMetrics> {
    let hyp_frames = index_by_frame(tracks)?;
    let gt_frames = index_by_frame(gt)?;
    let thr = cfg.hit_threshold;

    let excluded: BTreeSet<u64> = if cfg.restrict_to_gt {
        let mut near = BTreeSet::new();
        for (f, hyps) in &hyp_frames {
            let Some(truth) = gt_frames.get(f) else { continue };
            for (&h, hb) in hyps {
                if truth.values().any(|g| center_distance(g, hb) <= thr) {
                    near.insert(h);
                }
            }
        }
        hyp_frames
            .values()
            .flat_map(|m| m.keys().copied())
            .filter(|h| !near.contains(h))
            .collect()
    } else {
        BTreeSet::new()
    };

    let last_frame = hyp_frames.keys().chain(gt_frames.keys()).copied().max();
    let empty = BTreeMap::new();
    let mut previous: HashMap<u64, u64> = HashMap::new(); // gt -> hyp at t-1
    let mut last_hyp: HashMap<u64, u64> = HashMap::new(); // gt -> hyp at last match
    let mut hits: BTreeMap<u64, (usize, usize)> = BTreeMap::new(); // gt -> (hits, length)
    let mut per_frame = Vec::new();

    for t in 0..last_frame.map_or(0, |f| f + 1) {
        let truth = gt_frames.get(&t).unwrap_or(&empty);
        let hyps: BTreeMap<u64, BBox> = hyp_frames
            .get(&t)
            .unwrap_or(&empty)
            .iter()
            .filter(|(h, _)| !excluded.contains(h))
            .map(|(h, b)| (*h, *b))
            .collect();

        let mut current: HashMap<u64, u64> = HashMap::new();
        let mut taken: BTreeSet<u64> = BTreeSet::new();
        for (&g, gb) in truth {
            if let Some(&h) = previous.get(&g) {
                if let Some(hb) = hyps.get(&h) {
                    if !taken.contains(&h) && center_distance(gb, hb) <= thr {
                        current.insert(g, h);
                        taken.insert(h);
                    }
                }
            }
        }
        let free_gt: Vec<(u64, BBox)> = truth
            .iter()
            .filter(|(g, _)| !current.contains_key(g))
            .map(|(g, b)| (*g, *b))
            .collect();
        let free_hyp: Vec<(u64, BBox)> = hyps
            .iter()
            .filter(|(h, _)| !taken.contains(h))
            .map(|(h, b)| (*h, *b))
            .collect();
        let cost: Vec<Vec<Option<f64>>> = free_gt
            .iter()
            .map(|(_, gb)| {
                free_hyp
                    .iter()
                    .map(|(_, hb)| {
                        let d = center_distance(gb, hb);
                        (d <= thr).then_some(d)
                    })
                    .collect()
            })
            .collect();
        for (i, j) in max_matching(&cost, free_hyp.len(), thr) {
            current.insert(free_gt[i].0, free_hyp[j].0);
        }

        let mut idsw = 0;
        for (&g, &h) in &current {
            if let Some(&before) = last_hyp.get(&g) {
                if before != h {
                    idsw += 1;
                }
            }
            last_hyp.insert(g, h);
        }
        for &g in truth.keys() {
            let e = hits.entry(g).or_insert((0, 0));
            e.1 += 1;
            if current.contains_key(&g) {
                e.0 += 1;
            }
        }
        per_frame.push(MotFrame {
            gt: truth.len(),
            matches: current.len(),
            fp: hyps.len() - current.len(),
            fn_: truth.len() - current.len(),
            idsw,
        });
        previous = current;
    }

    let gt_positions: usize = per_frame.iter().map(|f| f.gt).sum();
    let matched: usize = per_frame.iter().map(|f| f.matches).sum();
    let mut mt = 0;
    let mut ml = 0;
    for &(h, len) in hits.values() {
        let rate = h as f64 / len as f64;
        if rate >= cfg.mostly_tracked {
            mt += 1;
        }
        if rate <= cfg.mostly_lost {
            ml += 1;
        }
    }
    Ok(MotMetrics {
        recall: if gt_positions == 0 {
            1.0
        } else {
            matched as f64 / gt_positions as f64
        },
        mota: MotMetrics::mota_from_frames(&per_frame),
        idsw: per_frame.iter().map(|f| f.idsw).sum(),
        mt,
        ml,
        gt_trajectories: hits.len(),
        gt_positions,
        fp: per_frame.iter().map(|f| f.fp).sum(),
        fn_: per_frame.iter().map(|f| f.fn_).sum(),
        per_frame,
    })
}

/// Detection report as structured text.
pub fn detection_report(m: &DetectionMetrics) -> String {
    let mut out = String::from("# detection metrics, IoU matching\n");
    out.push_str(&toml::to_string(m).expect("metrics serialize"));
    out
}

/// Tracking report as structured text.
pub fn tracking_report(m: &MotMetrics, cfg: &MotConfig) -> String {
    let mut out = format!(
        "# tracking metrics (CLEAR-MOT), hit threshold {} px\n# recall is position-level: matched GT positions / all GT positions\n",
        cfg.hit_threshold
    );
    out.push_str(&toml::to_string(m).expect("metrics serialize"));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 10.0, y + 10.0).unwrap()
    }

    fn rec(id: u64, frame: usize, b: BBox) -> TrackRecord {
        TrackRecord {
            track_id: id,
            frame,
            bbox: b,
            score: 1.0,
        }
    }

    #[test]
    fn f_from_paper_row() {
        assert!((f_measure(0.991, 0.981) - 0.986).abs() < 5e-4);
        assert_eq!(f_measure(0.0, 0.0), 0.0);
    }

    #[test]
    fn eight_of_ten_detections() {
        let gt: Vec<BBox> = (0..10).map(|k| sq(20.0 * k as f64, 0.0)).collect();
        let mut det: Vec<BBox> = gt[..8].to_vec();
        det.push(sq(0.0, 100.0));
        det.push(sq(50.0, 100.0));
        let m = detection_metrics(&[det], &[gt], 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (8, 2, 2));
        assert!((m.precision - 0.8).abs() < 1e-12 && (m.recall - 0.8).abs() < 1e-12);
        assert_eq!((m.nfp_per_image, m.nfn_per_image), (2.0, 2.0));
    }

    #[test]
    fn matching_prefers_cardinality() {
        // greedy on best IoU would pair p0 with t1 and strand t0
        let t = [sq(0.0, 0.0), sq(3.0, 0.0)];
        let p = [sq(1.5, 0.0), sq(4.5, 0.0)];
        assert_eq!(match_boxes(&p, &t, 0.5).len(), 2);
    }

    #[test]
    fn frame_count_mismatch_is_an_error() {
        assert!(detection_metrics(&[vec![]], &[vec![], vec![]], 0.5).is_err());
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        let r = [rec(1, 0, sq(0.0, 0.0)), rec(1, 0, sq(5.0, 0.0))];
        assert!(matches!(
            mot_metrics(&r, &[], &MotConfig::default()),
            Err(Error::DuplicateTrackEntry { track: 1, frame: 0 })
        ));
    }

    #[test]
    fn nine_of_ten_hits_in_one_frame() {
        let gt: Vec<TrackRecord> = (0..10).map(|k| rec(k, 0, sq(50.0 * k as f64, 0.0))).collect();
        let hyp: Vec<TrackRecord> = gt[..9].iter().map(|r| rec(r.track_id + 100, 0, r.bbox)).collect();
        let m = mot_metrics(&hyp, &gt, &MotConfig::default()).unwrap();
        assert!((m.recall - 0.9).abs() < 1e-12 && (m.mota - 0.9).abs() < 1e-12);
    }
}
