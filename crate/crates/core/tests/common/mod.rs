//! Independent reference implementations and fixtures shared by the
//! integration suites. Nothing here calls into the code under test except
//! to build inputs.

#![allow(dead_code)]

use fibertrack::detector::{Example, Heads};
use fibertrack::io::TrackRecord;
use fibertrack::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).unwrap()
}

/// Axis-aligned square of side `side` with top-left corner `(x, y)`.
pub fn sq(x: f64, y: f64, side: f64) -> BBox {
    bx(x, y, x + side, y + side)
}

pub fn rec(id: u64, frame: usize, b: BBox) -> TrackRecord {
    TrackRecord {
        track_id: id,
        frame,
        bbox: b,
        score: 1.0,
    }
}

// ---------------------------------------------------------------- assignment

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                go(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Minimum total cost over every way of pairing the smaller side of `cost`
/// one-to-one with the larger side, by exhaustive search.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let n = rows.max(cols);
    permutations(n)
        .iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .filter(|&(i, &j)| i < rows && j < cols)
                .map(|(i, &j)| cost[i][j])
                .sum::<f64>()
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, integer: bool) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    if integer {
                        r.random_range(0..10) as f64
                    } else {
                        r.random_range(0.0..100.0)
                    }
                })
                .collect()
        })
        .collect()
}

// ----------------------------------------------------------------------- IoU

/// IoU by counting sample points on a regular grid with spacing `step`,
/// sampled at cell midpoints. Exact when every corner lies on a multiple
/// of `step`.
pub fn raster_iou(a: &BBox, b: &BBox, step: f64) -> f64 {
    let x0 = a.x1.min(b.x1);
    let y0 = a.y1.min(b.y1);
    let x1 = a.x2.max(b.x2);
    let y1 = a.y2.max(b.y2);
    let nx = ((x1 - x0) / step).ceil() as usize;
    let ny = ((y1 - y0) / step).ceil() as usize;
    let inside = |b: &BBox, x: f64, y: f64| x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) * step;
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            union += u64::from(ia || ib);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// A random box with corners on the `lattice` grid inside `[0, extent]`.
pub fn lattice_box(r: &mut ChaCha8Rng, extent: f64, lattice: f64) -> BBox {
    let steps = (extent / lattice) as i64;
    loop {
        let mut c = [0i64; 4];
        for v in &mut c {
            *v = r.random_range(0..=steps);
        }
        let (x1, x2) = (c[0].min(c[1]), c[0].max(c[1]));
        let (y1, y2) = (c[2].min(c[3]), c[2].max(c[3]));
        if x2 > x1 && y2 > y1 {
            return bx(
                x1 as f64 * lattice,
                y1 as f64 * lattice,
                x2 as f64 * lattice,
                y2 as f64 * lattice,
            );
        }
    }
}

// -------------------------------------------------------------------- Kalman

pub type Mat = Vec<Vec<f64>>;

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn eye(n: usize) -> Mat {
    let mut m = zeros(n, n);
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = zeros(a.len(), b[0].len());
    for i in 0..a.len() {
        for k in 0..b.len() {
            for j in 0..b[0].len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn tr(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat, sb: f64) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + sb * q).collect())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inverse(a: &Mat) -> Mat {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let p = m[col][col];
        for v in &mut m[col] {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                for (v, pv) in m[r].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    m.into_iter().map(|row| row[n..].to_vec()).collect()
}

/// Constant-velocity transition for the `(x1, y1, vx1, vy1, x2, y2, vx2, vy2)`
/// layout, written out entry by entry.
pub fn cv_transition() -> Mat {
    let mut f = eye(8);
    f[0][2] = 1.0;
    f[1][3] = 1.0;
    f[4][6] = 1.0;
    f[5][7] = 1.0;
    f
}

pub fn corner_observation() -> Mat {
    let mut h = zeros(4, 8);
    h[0][0] = 1.0;
    h[1][1] = 1.0;
    h[2][4] = 1.0;
    h[3][5] = 1.0;
    h
}

/// Textbook predict step.
pub fn oracle_predict(x: &[f64], p: &Mat, q: f64) -> (Vec<f64>, Mat) {
    let f = cv_transition();
    let xs = mul(&f, &x.iter().map(|v| vec![*v]).collect());
    let pp = add(&mul(&mul(&f, p), &tr(&f)), &eye(8), q);
    (xs.into_iter().map(|r| r[0]).collect(), pp)
}

/// Textbook correct step with `R = r I`.
pub fn oracle_correct(x: &[f64], p: &Mat, z: &[f64], r: f64) -> (Vec<f64>, Mat) {
    let h = corner_observation();
    let ht = tr(&h);
    let s = add(&mul(&mul(&h, p), &ht), &eye(4), r);
    let k = mul(&mul(p, &ht), &inverse(&s));
    let xcol: Mat = x.iter().map(|v| vec![*v]).collect();
    let hx = mul(&h, &xcol);
    let y: Mat = z.iter().zip(&hx).map(|(zi, hi)| vec![zi - hi[0]]).collect();
    let xn = add(&xcol, &mul(&k, &y), 1.0);
    let pn = mul(&add(&eye(8), &mul(&k, &h), -1.0), p);
    (xn.into_iter().map(|r| r[0]).collect(), pn)
}

pub fn random_spd(r: &mut ChaCha8Rng, n: usize) -> Mat {
    let a: Mat = (0..n)
        .map(|_| (0..n).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    add(&mul(&a, &tr(&a)), &eye(n), 0.5)
}

// ---------------------------------------------------------- gradient checks

pub fn random_heads(r: &mut ChaCha8Rng, dim: usize) -> Heads {
    let mut h = Heads::zeros(dim);
    let mut fill = |head: &mut fibertrack::detector::LinearHead| {
        for w in &mut head.weights {
            *w = r.random_range(-0.5..0.5);
        }
        head.bias = r.random_range(-0.5..0.5);
    };
    fill(&mut h.classifier);
    for head in &mut h.regressor {
        fill(head);
    }
    h
}

pub fn random_examples(r: &mut ChaCha8Rng, dim: usize, n: usize) -> Vec<Example> {
    (0..n)
        .map(|_| Example {
            x: (0..dim).map(|_| r.random_range(-2.0..2.0)).collect(),
            positive: r.random_bool(0.5),
            target: [
                r.random_range(-1.5..1.5),
                r.random_range(-1.5..1.5),
                r.random_range(-1.5..1.5),
                r.random_range(-1.5..1.5),
            ],
        })
        .collect()
}

/// Every parameter of `h` as a mutable reference, in a fixed order.
pub fn parameters(h: &mut Heads) -> Vec<&mut f64> {
    let mut out: Vec<&mut f64> = Vec::new();
    let Heads { classifier, regressor } = h;
    for head in std::iter::once(classifier).chain(regressor.iter_mut()) {
        out.extend(head.weights.iter_mut());
        out.push(&mut head.bias);
    }
    out
}

/// Largest relative gap between the analytic gradient and central finite
/// differences, `|g - fd| / max(|g|, |fd|, 1e-6)`.
pub fn gradient_check(heads: &Heads, batch: &[&Example], reg_weight: f64, decay: f64) -> f64 {
    let (_, grad) = heads.loss_and_gradient(batch, reg_weight, decay);
    let mut g = grad.clone();
    let analytic: Vec<f64> = parameters(&mut g).into_iter().map(|v| *v).collect();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, a) in analytic.iter().enumerate() {
        let mut plus = heads.clone();
        *parameters(&mut plus)[k] += eps;
        let mut minus = heads.clone();
        *parameters(&mut minus)[k] -= eps;
        let fd = (plus.loss_and_gradient(batch, reg_weight, decay).0
            - minus.loss_and_gradient(batch, reg_weight, decay).0)
            / (2.0 * eps);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

// ------------------------------------------------------- tracking fixtures

/// A box of side 12 drifting one pixel right per frame from `(x, y)`.
pub fn drifting(x: f64, y: f64, frame: usize) -> BBox {
    sq(x + frame as f64, y, 12.0)
}

/// Per-frame detections: `objects` lists a start position and the frames in
/// which that object is detected.
pub fn scene(num_frames: usize, objects: &[((f64, f64), Vec<usize>)]) -> Vec<Vec<BBox>> {
    let mut frames = vec![Vec::new(); num_frames];
    for ((x, y), present) in objects {
        for &f in present {
            frames[f].push(drifting(*x, *y, f));
        }
    }
    frames
}

// --------------------------------------------------------- metric goldens

/// Ten-frame trajectory `gt_id` at `(x, y)` with hypothesis `hyp_id` present
/// (and on target) only in `hit_frames`.
pub fn partial_hits(gt_id: u64, hyp_id: u64, x: f64, hit_frames: &[usize]) -> (Vec<TrackRecord>, Vec<TrackRecord>) {
    let gt: Vec<_> = (0..10).map(|f| rec(gt_id, f, sq(x + f as f64, 50.0, 10.0))).collect();
    let hyp: Vec<_> = hit_frames
        .iter()
        .map(|&f| rec(hyp_id, f, sq(x + f as f64 + 1.0, 51.0, 10.0)))
        .collect();
    (gt, hyp)
}

/// Small synthetic configurations exercised by the identity checks.
pub fn small_synth(seed: u64) -> fibertrack::synth::SynthConfig {
    fibertrack::synth::SynthConfig {
        width: 128,
        height: 128,
        num_frames: 12,
        num_fibers: 10,
        rng_seed: seed,
        ..Default::default()
    }
}
