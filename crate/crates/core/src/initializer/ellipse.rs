use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

/// Ellipse with semi-axes `a >= b > 0` and orientation `theta` of the major
/// axis in `[0, pi)`, measured from +x toward +y (image coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
    /// Accumulator support; zero for ellipses not produced by a Hough search.
    pub votes: u32,
}

impl Ellipse {
    /// Normalizes the axis order and orientation range.
    pub fn new(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        let (a, b, theta) = if a >= b {
            (a, b, theta)
        } else {
            (b, a, theta + std::f64::consts::FRAC_PI_2)
        };
        let theta = theta.rem_euclid(std::f64::consts::PI);
        Self {
            cx,
            cy,
            a,
            b,
            theta,
            votes: 0,
        }
    }

    /// True when `(x, y)` lies inside or on the ellipse.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Boundary point at parameter `t`.
    pub fn point_at(&self, t: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (st, ct) = t.sin_cos();
        let u = self.a * ct;
        let v = self.b * st;
        (self.cx + u * c - v * s, self.cy + u * s + v * c)
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.a * self.b
    }
}

/// Tight axis-aligned bounding box of an ellipse.
pub fn min_bbox(e: &Ellipse) -> BBox {
    let (s, c) = e.theta.sin_cos();
    let half_w = (e.a * e.a * c * c + e.b * e.b * s * s).sqrt();
    let half_h = (e.a * e.a * s * s + e.b * e.b * c * c).sqrt();
    BBox {
        x1: e.cx - half_w,
        y1: e.cy - half_h,
        x2: e.cx + half_w,
        y2: e.cy + half_h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_4, PI};

    // Oracle: extremes over densely sampled boundary points.
    fn sampled_extent(e: &Ellipse) -> (f64, f64, f64, f64) {
        let n = 200_000;
        let mut ext = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for i in 0..n {
            let (x, y) = e.point_at(2.0 * PI * i as f64 / n as f64);
            ext.0 = ext.0.min(x);
            ext.1 = ext.1.min(y);
            ext.2 = ext.2.max(x);
            ext.3 = ext.3.max(y);
        }
        ext
    }

    #[test]
    fn circle_and_axis_aligned() {
        let b = min_bbox(&Ellipse::new(0.0, 0.0, 5.0, 5.0, 0.3));
        for (got, want) in [(b.x1, -5.0), (b.y1, -5.0), (b.x2, 5.0), (b.y2, 5.0)] {
            assert!((got - want).abs() < 1e-12);
        }
        let b = min_bbox(&Ellipse::new(0.0, 0.0, 4.0, 2.0, 0.0));
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (-4.0, -2.0, 4.0, 2.0));
    }

    #[test]
    fn diagonal_ellipse_matches_sampled_oracle() {
        let e = Ellipse::new(0.0, 0.0, 4.0, 2.0, FRAC_PI_4);
        let (x1, y1, x2, y2) = sampled_extent(&e);
        // frozen from the oracle: sqrt(10)
        assert!((x2 - 3.162_277_660).abs() < 1e-6);
        assert!((y2 - 3.162_277_660).abs() < 1e-6);
        let b = min_bbox(&e);
        assert!((b.x2 - 10f64.sqrt()).abs() < 1e-12);
        assert!((b.y2 - 10f64.sqrt()).abs() < 1e-12);
        assert!((b.x1 - x1).abs() < 1e-6 && (b.y1 - y1).abs() < 1e-6);
    }

    #[test]
    fn axis_swap_normalizes() {
        let e = Ellipse::new(1.0, 2.0, 2.0, 4.0, 0.0);
        assert_eq!(e.a, 4.0);
        assert!((e.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn min_bbox_is_tight(
            cx in -50.0f64..50.0, cy in -50.0f64..50.0,
            a in 1.0f64..20.0, ratio in 0.2f64..1.0, theta in 0.0f64..PI,
        ) {
            let e = Ellipse::new(cx, cy, a, a * ratio, theta);
            let b = min_bbox(&e);
            let (x1, y1, x2, y2) = sampled_extent(&e);
            // no sampled point falls outside
            prop_assert!(x1 >= b.x1 - 1e-9 && y1 >= b.y1 - 1e-9);
            prop_assert!(x2 <= b.x2 + 1e-9 && y2 <= b.y2 + 1e-9);
            // shrinking any side by 2% of its extent excludes some point
            let sw = 0.02 * b.width();
            let sh = 0.02 * b.height();
            prop_assert!(x1 < b.x1 + sw && x2 > b.x2 - sw);
            prop_assert!(y1 < b.y1 + sh && y2 > b.y2 - sh);
        }
    }
}
