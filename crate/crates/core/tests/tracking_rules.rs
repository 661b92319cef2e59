//! Births, deaths, gap filling and the short-track prune, on hand-built
//! detection sequences with the default alpha = beta = 5.

mod common;

use common::*;
use fibertrack::selftrain::{refine_tracks, tracks_to_detections, LoopConfig};
use fibertrack::tracker::{track_sequence, TrackStatus, TrackerConfig};
use fibertrack::{iou, BBox};

const FRAMES: usize = 20;

fn run(objects: &[((f64, f64), Vec<usize>)]) -> (Vec<fibertrack::tracker::TrackState>, Vec<Vec<BBox>>) {
    let cfg = LoopConfig::default();
    assert_eq!((cfg.tracker.alpha, cfg.beta), (5, 5));
    let dets = scene(FRAMES, objects);
    let tracks = track_sequence(&dets, &cfg.tracker).unwrap();
    let refined = tracks_to_detections(&tracks, FRAMES, &cfg);
    (tracks, refined)
}

fn all_frames() -> Vec<usize> {
    (0..FRAMES).collect()
}

#[test]
fn missed_detection_is_added_back_by_the_prediction() {
    let present: Vec<usize> = all_frames().into_iter().filter(|&f| f != 9).collect();
    let (tracks, refined) = run(&[((20.0, 20.0), present)]);
    assert_eq!(tracks.len(), 1, "the gap must not start a new identity");
    let t = &tracks[0];
    assert_eq!(t.history.len(), FRAMES);
    let bridged: Vec<_> = t.history.iter().filter(|h| !h.associated).map(|h| h.frame).collect();
    assert_eq!(bridged, vec![9]);
    assert!(refined.iter().all(|f| f.len() == 1));
    assert!(iou(&refined[9][0], &drifting(20.0, 20.0, 9)) > 0.9);
}

#[test]
fn persistent_new_detection_is_saved() {
    let late: Vec<usize> = (8..FRAMES).collect();
    let (tracks, refined) = run(&[((20.0, 20.0), all_frames()), ((80.0, 60.0), late)]);
    assert_eq!(tracks.len(), 2);
    let born = tracks.iter().find(|t| t.first_frame() == 8).unwrap();
    assert!(born.history.iter().all(|h| h.associated));
    for (f, boxes) in refined.iter().enumerate() {
        assert_eq!(boxes.len(), if f >= 8 { 2 } else { 1 }, "frame {f}");
    }
}

#[test]
fn transient_false_positive_is_removed() {
    let (tracks, refined) = run(&[((20.0, 20.0), all_frames()), ((90.0, 90.0), vec![6])]);
    let spurious = tracks.iter().find(|t| t.first_frame() == 6).unwrap();
    assert_eq!(spurious.status, TrackStatus::Dead);
    let predicted = spurious.history.iter().filter(|h| !h.associated).count();
    assert_eq!(predicted, 5, "dies after alpha unmatched frames");
    assert_eq!(spurious.last_frame(), 11);
    assert!(refined.iter().all(|f| f.len() == 1));
}

#[test]
fn five_observed_frames_are_pruned_and_six_are_kept() {
    for (span, kept) in [(5usize, false), (6, true)] {
        let present: Vec<usize> = (4..4 + span).collect();
        let (tracks, refined) = run(&[((20.0, 20.0), all_frames()), ((90.0, 90.0), present)]);
        let short = tracks.iter().find(|t| t.first_frame() == 4).unwrap();
        assert_eq!(short.status, TrackStatus::Dead);
        assert_eq!(short.history.len(), span + 5);
        let frames_with_two = refined.iter().filter(|f| f.len() == 2).count();
        assert_eq!(frames_with_two, if kept { span } else { 0 }, "span {span}");
    }
}

#[test]
fn keeping_timeout_predictions_changes_the_prune_outcome() {
    let cfg = LoopConfig {
        drop_trailing_timeout_predictions: false,
        ..LoopConfig::default()
    };
    let dets = scene(FRAMES, &[((90.0, 90.0), vec![6])]);
    let tracks = track_sequence(&dets, &cfg.tracker).unwrap();
    // One detection plus five predictions is six entries, above beta.
    let recs = refine_tracks(&tracks, FRAMES, &cfg);
    assert_eq!(recs.len(), 6);
    assert_eq!(recs.iter().filter(|r| r.score == 0.0).count(), 5);
}

#[test]
fn a_track_alive_at_the_end_keeps_its_trailing_predictions() {
    let present: Vec<usize> = (0..FRAMES - 2).collect();
    let (tracks, refined) = run(&[((20.0, 20.0), present)]);
    assert_eq!(tracks[0].status, TrackStatus::Active);
    assert!(refined.iter().all(|f| f.len() == 1));
}

#[test]
fn overlapping_survivors_are_merged_per_frame() {
    // Two objects overlapping at IoU ~0.85 both persist; NMS at 0.7 keeps one.
    let (tracks, refined) = run(&[((20.0, 20.0), all_frames()), ((21.0, 20.0), all_frames())]);
    assert_eq!(tracks.len(), 2);
    assert!(refined.iter().all(|f| f.len() == 1));
}

#[test]
fn boundary_exit_kills_a_track_without_recording_outside() {
    let cfg = TrackerConfig::default().with_bounds(60.0, 60.0);
    // Moving right at 4 px per frame, last seen near the right edge.
    let dets: Vec<Vec<BBox>> = (0..12)
        .map(|f| {
            if f < 10 {
                vec![sq(12.0 + 4.0 * f as f64, 20.0, 8.0)]
            } else {
                vec![]
            }
        })
        .collect();
    let tracks = track_sequence(&dets, &cfg).unwrap();
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0].status, TrackStatus::Dead);
    for h in &tracks[0].history {
        assert!(h.bbox.center().0 < 60.0);
    }
}
