//! Constant-velocity Kalman filter over the two box corners.
//!
//! State layout: `(x1, y1, vx1, vy1, x2, y2, vx2, vy2)`. The measurement is
//! the four corner coordinates.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub type State = SVector<f64, 8>;
pub type Covariance = SMatrix<f64, 8, 8>;
pub type Measurement = SVector<f64, 4>;

type Observation = SMatrix<f64, 4, 8>;

/// State indices of the four measured position components.
const POSITION: [usize; 4] = [0, 1, 4, 5];

/// Transition matrix: each position advances by its velocity.
pub fn transition() -> Covariance {
    let mut f = Covariance::identity();
    for p in [0, 1, 4, 5] {
        f[(p, p + 2)] = 1.0;
    }
    f
}

fn observation() -> Observation {
    let mut h = Observation::zeros();
    for (row, &col) in POSITION.iter().enumerate() {
        h[(row, col)] = 1.0;
    }
    h
}

pub fn state_from_box(b: &BBox) -> State {
    State::from([b.x1, b.y1, 0.0, 0.0, b.x2, b.y2, 0.0, 0.0])
}

pub fn measurement(b: &BBox) -> Measurement {
    Measurement::new(b.x1, b.y1, b.x2, b.y2)
}

/// Box spanned by the state's corners. Corners that crossed are reordered
/// and degenerate extents widened to a small positive size.
pub fn box_from_state(s: &State) -> BBox {
    BBox::from_corners_lenient(s[0], s[1], s[4], s[5], 1e-3)
}

/// `s <- F s`, `P <- F P F^T + q I`.
pub fn predict(s: &State, p: &Covariance, q: f64) -> (State, Covariance) {
    let f = transition();
    let s = f * s;
    let p = f * p * f.transpose() + Covariance::identity() * q;
    (s, p)
}

/// Standard update with `R = r I`. The corrected covariance is symmetrized
/// to keep rounding from breaking symmetry over long sequences.
pub fn correct(s: &State, p: &Covariance, z: &Measurement, r: f64) -> Result<(State, Covariance)> {
    let h = observation();
    let innovation_cov = h * p * h.transpose() + SMatrix::<f64, 4, 4>::identity() * r;
    let inv = innovation_cov.try_inverse().ok_or(Error::SingularInnovation)?;
    let gain = p * h.transpose() * inv;
    let s = s + gain * (z - h * s);
    let p = (Covariance::identity() - gain * h) * p;
    let p = 0.5 * (p + p.transpose());
    Ok((s, p))
}
