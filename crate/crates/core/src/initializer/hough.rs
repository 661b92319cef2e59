//! Pair-of-points ellipse Hough transform.
//!
//! Any two boundary points are hypothesized to be the endpoints of a major
//! axis, which fixes the center, orientation and semi-major axis. Every other
//! boundary point within reach then votes for the semi-minor axis it implies;
//! a pair whose best minor-axis bin collects enough votes yields an ellipse.
//! The search runs per connected blob of the mask so unrelated boundaries
//! never vote for each other.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ellipse::Ellipse;
use crate::raster::connected_components;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoughParams {
    pub min_semi_axis: f64,
    pub max_semi_axis: f64,
    /// Required votes as a fraction of the boundary points expected on the
    /// candidate ellipse.
    pub vote_fraction: f64,
    /// Width of a minor-axis accumulator bin, pixels.
    pub bin_width: f64,
    /// Boundary pixel centers sit inside the true contour; this is added
    /// back to both recovered semi-axes.
    pub axis_pad: f64,
    /// Blobs with more boundary points than this are skipped.
    pub max_boundary_points: usize,
}

impl Default for HoughParams {
    fn default() -> Self {
        Self {
            min_semi_axis: 3.0,
            max_semi_axis: 12.0,
            vote_fraction: 0.5,
            bin_width: 0.5,
            axis_pad: 0.5,
            max_boundary_points: 600,
        }
    }
}

/// Ellipses found in a binary mask (row-major, `width * height`).
pub fn hough_ellipses(mask: &[bool], width: usize, height: usize, params: &HoughParams) -> Vec<Ellipse> {
    let mut found = Vec::new();
    for comp in connected_components(mask, width, height) {
        let boundary: Vec<(f64, f64)> = comp
            .iter()
            .filter(|&&(x, y)| is_boundary(mask, width, height, x, y))
            .map(|&(x, y)| (x as f64 + 0.5, y as f64 + 0.5))
            .collect();
        if boundary.len() < 5 || boundary.len() > params.max_boundary_points {
            continue;
        }
        found.extend(search_blob(boundary, params));
    }
    dedup(found)
}

fn is_boundary(mask: &[bool], w: usize, h: usize, x: usize, y: usize) -> bool {
    x == 0
        || y == 0
        || x + 1 == w
        || y + 1 == h
        || !mask[y * w + x - 1]
        || !mask[y * w + x + 1]
        || !mask[(y - 1) * w + x]
        || !mask[(y + 1) * w + x]
}

/// Ramanujan's approximation of the ellipse perimeter.
fn perimeter(a: f64, b: f64) -> f64 {
    let h = ((a - b) / (a + b)).powi(2);
    PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
}

/// Boundary pixels per unit contour length for an 8-connected digital
/// curve, averaged over orientations (2*sqrt(2)/pi).
const BOUNDARY_DENSITY: f64 = 0.9003;

struct Candidate {
    ellipse: Ellipse,
    /// Votes relative to the boundary points expected on the ellipse.
    support: f64,
}

fn search_blob(mut points: Vec<(f64, f64)>, params: &HoughParams) -> Vec<Ellipse> {
    let mut out = Vec::new();
    let bins = ((params.max_semi_axis / params.bin_width).ceil() as usize) + 2;
    let mut acc = vec![0u32; bins];
    let mut acc_sum = vec![0.0f64; bins];
    loop {
        let mut best: Option<Candidate> = None;
        let n = points.len();
        for i in 0..n {
            for j in (i + 1)..n {
                let (p1, p2) = (points[i], points[j]);
                let dist = (p1.0 - p2.0).hypot(p1.1 - p2.1);
                let a = 0.5 * dist;
                if a < params.min_semi_axis || a > params.max_semi_axis {
                    continue;
                }
                let c = (0.5 * (p1.0 + p2.0), 0.5 * (p1.1 + p2.1));
                acc.iter_mut().for_each(|v| *v = 0);
                acc_sum.iter_mut().for_each(|v| *v = 0.0);
                for (k, p) in points.iter().enumerate() {
                    if k == i || k == j {
                        continue;
                    }
                    let d = (p.0 - c.0).hypot(p.1 - c.1);
                    if d >= a + 1.0 || d < 1e-9 {
                        continue;
                    }
                    // Digitized contours wander about a pixel around the
                    // true curve; points just outside the axis circle still
                    // vote, as if they sat on it.
                    let d = d.min(a * (1.0 - 1e-9));
                    let f = (p.0 - p2.0).hypot(p.1 - p2.1);
                    let cos_tau = ((a * a + d * d - f * f) / (2.0 * a * d)).clamp(-1.0, 1.0);
                    let sin2 = 1.0 - cos_tau * cos_tau;
                    let denom = a * a - d * d * cos_tau * cos_tau;
                    if denom <= 1e-9 {
                        continue;
                    }
                    let b2 = a * a * d * d * sin2 / denom;
                    let b = b2.sqrt();
                    if b < params.min_semi_axis - params.axis_pad || b > a {
                        continue;
                    }
                    let bin = (b / params.bin_width) as usize;
                    if bin < bins {
                        acc[bin] += 1;
                        acc_sum[bin] += b;
                    }
                }
                // Peak over a window of three bins absorbs digitization jitter.
                let mut peak = (0u32, 0.0f64);
                for bin in 1..bins - 1 {
                    let v = acc[bin - 1] + acc[bin] + acc[bin + 1];
                    if v > peak.0 {
                        let s = acc_sum[bin - 1] + acc_sum[bin] + acc_sum[bin + 1];
                        peak = (v, s / v as f64);
                    }
                }
                let (votes, b) = peak;
                if votes == 0 {
                    continue;
                }
                let expected = BOUNDARY_DENSITY * perimeter(a, b);
                let support = votes as f64 / expected;
                if support < params.vote_fraction {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some(cand) => support > cand.support,
                };
                if better {
                    let theta = (p2.1 - p1.1).atan2(p2.0 - p1.0);
                    let mut e = Ellipse::new(c.0, c.1, a + params.axis_pad, b + params.axis_pad, theta);
                    e.votes = votes;
                    best = Some(Candidate { ellipse: e, support });
                }
            }
        }
        let Some(cand) = best else { break };
        let e = cand.ellipse;
        // drop the points explained by this ellipse and search again
        let before = points.len();
        points.retain(|&(x, y)| !near_contour(&e, x, y, params.axis_pad + 1.0));
        out.push(e);
        if points.len() == before || points.len() < 5 {
            break;
        }
    }
    out
}

/// True when `(x, y)` lies within the ellipse grown by `tol` pixels.
fn near_contour(e: &Ellipse, x: f64, y: f64, tol: f64) -> bool {
    let grown = Ellipse::new(e.cx, e.cy, e.a + tol, e.b + tol, e.theta);
    grown.contains(x, y)
}

/// Keeps the best-supported ellipse among any whose centers are closer than
/// the kept ellipse's semi-minor axis.
fn dedup(mut ellipses: Vec<Ellipse>) -> Vec<Ellipse> {
    // stable: equal votes keep discovery order
    ellipses.sort_by_key(|e| std::cmp::Reverse(e.votes));
    let mut kept: Vec<Ellipse> = Vec::new();
    for e in ellipses {
        if kept.iter().all(|k| (k.cx - e.cx).hypot(k.cy - e.cy) >= k.b) {
            kept.push(e);
        }
    }
    kept.sort_by(|a, b| a.cy.total_cmp(&b.cy).then(a.cx.total_cmp(&b.cx)));
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(w: usize, h: usize, ellipses: &[Ellipse]) -> Vec<bool> {
        let mut m = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                m[y * w + x] = ellipses.iter().any(|e| e.contains(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        m
    }

    #[test]
    fn blank_mask_yields_nothing() {
        assert!(hough_ellipses(&vec![false; 400], 20, 20, &HoughParams::default()).is_empty());
    }

    #[test]
    fn recovers_single_tilted_ellipse() {
        let truth = Ellipse::new(30.3, 27.8, 8.0, 5.0, 30f64.to_radians());
        let mask = render(60, 60, &[truth]);
        let found = hough_ellipses(&mask, 60, 60, &HoughParams::default());
        assert_eq!(found.len(), 1, "{found:?}");
        let e = found[0];
        assert!((e.cx - truth.cx).hypot(e.cy - truth.cy) <= 2.0);
        assert!((e.a - 8.0).abs() <= 0.8, "a = {}", e.a);
        assert!((e.b - 5.0).abs() <= 0.5, "b = {}", e.b);
    }

    #[test]
    fn recovers_two_separated_ellipses() {
        let a = Ellipse::new(20.0, 30.0, 7.0, 6.0, 0.4);
        let b = Ellipse::new(65.0, 32.0, 6.0, 4.5, 2.0);
        let mask = render(90, 60, &[a, b]);
        let found = hough_ellipses(&mask, 90, 60, &HoughParams::default());
        assert_eq!(found.len(), 2, "{found:?}");
        for t in [a, b] {
            assert!(found.iter().any(|e| (e.cx - t.cx).hypot(e.cy - t.cy) <= 2.0));
        }
    }

    #[test]
    fn two_touching_ellipses_in_one_blob() {
        let a = Ellipse::new(20.0, 20.0, 6.0, 6.0, 0.0);
        let b = Ellipse::new(31.5, 20.0, 6.0, 6.0, 0.0);
        let mask = render(50, 40, &[a, b]);
        let found = hough_ellipses(&mask, 50, 40, &HoughParams::default());
        assert_eq!(found.len(), 2, "{found:?}");
    }

    #[test]
    fn circle_perimeter() {
        assert!((perimeter(3.0, 3.0) - 6.0 * PI).abs() < 1e-9);
    }
}
