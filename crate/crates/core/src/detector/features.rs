//! Window descriptors: a resampled, contrast-normalized intensity patch
//! followed by a signed gradient-orientation histogram of that patch.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::raster::Plane;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    /// Side of the square resampling grid.
    pub patch_size: usize,
    /// Margin added on every side of a box before resampling, as a fraction
    /// of the box extent.
    pub context: f64,
    pub orientation_bins: usize,
    /// Lower bound on the deviation used to normalize a patch, in gray
    /// levels. Keeps flat, noise-only windows from being scaled up to the
    /// contrast of a real fiber.
    pub min_contrast: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            patch_size: 24,
            context: 0.25,
            orientation_bins: 8,
            min_contrast: 12.0,
        }
    }
}

impl FeatureSpec {
    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size + self.orientation_bins
    }

    /// Size of one grid cell in image pixels for a box extent `side`.
    fn cell(&self, side: f64) -> f64 {
        side * (1.0 + 2.0 * self.context) / self.patch_size as f64
    }

    /// Descriptor of an arbitrary box by bilinear resampling.
    pub fn extract(&self, plane: &Plane, b: &BBox) -> Vec<f64> {
        let n = self.patch_size;
        let (cw, ch) = (self.cell(b.width()), self.cell(b.height()));
        let x0 = b.x1 - self.context * b.width();
        let y0 = b.y1 - self.context * b.height();
        let mut patch = Vec::with_capacity(n * n);
        for i in 0..n {
            let y = y0 + (i as f64 + 0.5) * ch;
            for j in 0..n {
                patch.push(plane.sample(x0 + (j as f64 + 0.5) * cw, y));
            }
        }
        self.describe(patch)
    }

    /// Normalizes a raw `patch_size^2` patch and appends its histogram.
    pub fn describe(&self, mut patch: Vec<f64>) -> Vec<f64> {
        let n = self.patch_size;
        let hist = self.orientation_histogram(&patch);
        let len = patch.len() as f64;
        let mean = patch.iter().sum::<f64>() / len;
        let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len;
        let scale = 1.0 / var.max(0.0).sqrt().max(self.min_contrast).max(1e-6);
        for v in patch.iter_mut() {
            *v = (*v - mean) * scale;
        }
        debug_assert_eq!(patch.len(), n * n);
        patch.extend(hist);
        patch
    }

    fn orientation_bin(&self, gx: f64, gy: f64) -> Option<(usize, f64)> {
        let mag = gx.hypot(gy);
        if mag <= 0.0 {
            return None;
        }
        let bins = self.orientation_bins;
        let angle = gy.atan2(gx).rem_euclid(2.0 * PI);
        let bin = ((angle / (2.0 * PI) * bins as f64) as usize).min(bins - 1);
        Some((bin, mag))
    }

    /// Magnitude-weighted histogram of gradient direction over `[0, 2 pi)`,
    /// L2-normalized. Gradients are central differences inside the patch.
    fn orientation_histogram(&self, patch: &[f64]) -> Vec<f64> {
        let n = self.patch_size;
        let bins = self.orientation_bins;
        let mut hist = vec![0.0; bins];
        if bins == 0 {
            return hist;
        }
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let gx = patch[y * n + x + 1] - patch[y * n + x - 1];
                let gy = patch[(y + 1) * n + x] - patch[(y - 1) * n + x];
                if let Some((bin, mag)) = self.orientation_bin(gx, gy) {
                    hist[bin] += mag;
                }
            }
        }
        let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            hist.iter_mut().for_each(|v| *v /= norm);
        }
        hist
    }
}

/// Square windows of one side laid out on a regular stride, with their
/// resampling grid precomputed once for the whole image.
///
/// The stride is a whole number of grid cells, so each window's patch is
/// an exact crop of the shared grid and matches [`FeatureSpec::extract`].
pub struct WindowGrid<'a> {
    spec: &'a FeatureSpec,
    grid: Plane,
    side: f64,
    stride_cells: usize,
    /// Number of window positions along x and y.
    pub cols: usize,
    pub rows: usize,
}

impl<'a> WindowGrid<'a> {
    /// `stride_cells` is the window step measured in grid cells.
    pub fn new(spec: &'a FeatureSpec, plane: &Plane, side: f64, stride_cells: usize) -> Self {
        let cell = spec.cell(side);
        let stride = stride_cells as f64 * cell;
        let fit = |extent: usize| -> usize {
            if side > extent as f64 {
                0
            } else {
                ((extent as f64 - side) / stride).floor() as usize + 1
            }
        };
        let (cols, rows) = (fit(plane.width), fit(plane.height));
        let n = spec.patch_size;
        let gw = if cols == 0 { 0 } else { (cols - 1) * stride_cells + n };
        let gh = if rows == 0 { 0 } else { (rows - 1) * stride_cells + n };
        let origin = -spec.context * side;
        let mut grid = Plane::filled(gw, gh, 0.0);
        for gy in 0..gh {
            let y = origin + (gy as f64 + 0.5) * cell;
            for gx in 0..gw {
                grid.set(gx, gy, plane.sample(origin + (gx as f64 + 0.5) * cell, y));
            }
        }
        Self {
            spec,
            grid,
            side,
            stride_cells,
            cols,
            rows,
        }
    }

    pub fn window(&self, col: usize, row: usize) -> BBox {
        let stride = self.stride_cells as f64 * self.spec.cell(self.side);
        let x = col as f64 * stride;
        let y = row as f64 * stride;
        BBox {
            x1: x,
            y1: y,
            x2: x + self.side,
            y2: y + self.side,
        }
    }

    /// Linear responses `weights . features(col, row) + bias` for every
    /// window, row-major. Equivalent to extracting each descriptor, but the
    /// patch statistics and orientation histograms come from summed-area
    /// tables so only the template correlation costs `patch_size^2` per
    /// window.
    pub fn responses(&self, weights: &[f64], bias: f64) -> Vec<f64> {
        let n = self.spec.patch_size;
        let bins = self.spec.orientation_bins;
        let (gw, gh) = (self.grid.width, self.grid.height);
        let values = SummedArea::new(gw, gh, |x, y| self.grid.get(x, y));
        let squares = SummedArea::new(gw, gh, |x, y| self.grid.get(x, y).powi(2));
        let (bin_of, mag) = self.gradient_bins();
        let hist_tables: Vec<SummedArea> = (0..bins)
            .map(|b| {
                SummedArea::new(
                    gw,
                    gh,
                    |x, y| if bin_of[y * gw + x] == b { mag[y * gw + x] } else { 0.0 },
                )
            })
            .collect();
        let template = &weights[..n * n];
        let hist_weights = &weights[n * n..];
        let template_sum: f64 = template.iter().sum();
        let count = (n * n) as f64;

        let mut out = Vec::with_capacity(self.rows * self.cols);
        let mut hist = vec![0.0; bins];
        for row in 0..self.rows {
            for col in 0..self.cols {
                let (ox, oy) = (col * self.stride_cells, row * self.stride_cells);
                let mean = values.sum(ox, oy, n, n) / count;
                let var = squares.sum(ox, oy, n, n) / count - mean * mean;
                let mut corr = 0.0;
                for i in 0..n {
                    let start = (oy + i) * gw + ox;
                    let line = &self.grid.data[start..start + n];
                    corr += template[i * n..(i + 1) * n]
                        .iter()
                        .zip(line)
                        .map(|(w, v)| w * v)
                        .sum::<f64>();
                }
                let sd = var.max(0.0).sqrt().max(self.spec.min_contrast).max(1e-6);
                let patch_term = (corr - mean * template_sum) / sd;
                for (b, h) in hist.iter_mut().enumerate() {
                    *h = hist_tables[b].sum(ox + 1, oy + 1, n - 2, n - 2);
                }
                let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
                let hist_term = if norm > 1e-12 {
                    hist.iter().zip(hist_weights).map(|(h, w)| h * w).sum::<f64>() / norm
                } else {
                    0.0
                };
                out.push(bias + patch_term + hist_term);
            }
        }
        out
    }

    /// Orientation bin and gradient magnitude at every grid point with four
    /// neighbours; border points get magnitude 0.
    fn gradient_bins(&self) -> (Vec<usize>, Vec<f64>) {
        let (gw, gh) = (self.grid.width, self.grid.height);
        let mut bin_of = vec![0; gw * gh];
        let mut mag = vec![0.0; gw * gh];
        for y in 1..gh.saturating_sub(1) {
            for x in 1..gw - 1 {
                let gx = self.grid.get(x + 1, y) - self.grid.get(x - 1, y);
                let gy = self.grid.get(x, y + 1) - self.grid.get(x, y - 1);
                if let Some((b, m)) = self.spec.orientation_bin(gx, gy) {
                    bin_of[y * gw + x] = b;
                    mag[y * gw + x] = m;
                }
            }
        }
        (bin_of, mag)
    }

    pub fn features(&self, col: usize, row: usize) -> Vec<f64> {
        let n = self.spec.patch_size;
        let (ox, oy) = (col * self.stride_cells, row * self.stride_cells);
        let mut patch = Vec::with_capacity(n * n);
        for i in 0..n {
            let start = (oy + i) * self.grid.width + ox;
            patch.extend_from_slice(&self.grid.data[start..start + n]);
        }
        self.spec.describe(patch)
    }
}

/// Summed-area table with a zero first row and column.
struct SummedArea {
    stride: usize,
    table: Vec<f64>,
}

impl SummedArea {
    fn new(w: usize, h: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let stride = w + 1;
        let mut table = vec![0.0; stride * (h + 1)];
        for y in 0..h {
            let mut line = 0.0;
            for x in 0..w {
                line += value(x, y);
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + line;
            }
        }
        Self { stride, table }
    }

    /// Sum over the `w x h` block whose top-left cell is `(x, y)`.
    fn sum(&self, x: usize, y: usize, w: usize, h: usize) -> f64 {
        let s = self.stride;
        self.table[(y + h) * s + x + w] - self.table[y * s + x + w] - self.table[(y + h) * s + x]
            + self.table[y * s + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_plane() -> Plane {
        let mut p = Plane::filled(40, 30, 0.0);
        for y in 0..30 {
            for x in 0..40 {
                p.set(
                    x,
                    y,
                    ((x * 7 + y * 13) % 23) as f64
                        + if (x as i32 - 20).pow(2) + (y as i32 - 15).pow(2) < 30 {
                            80.0
                        } else {
                            0.0
                        },
                );
            }
        }
        p
    }

    #[test]
    fn dimension_and_normalization() {
        let spec = FeatureSpec::default();
        let f = spec.extract(&test_plane(), &BBox::new(10.0, 5.0, 26.0, 21.0).unwrap());
        assert_eq!(f.len(), spec.dim());
        let patch = &f[..576];
        let mean = patch.iter().sum::<f64>() / 576.0;
        let var = patch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 576.0;
        // the blob's contrast is well above the floor, so plain unit variance
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        let hist_norm = f[576..].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((hist_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn flat_patch_is_all_zero() {
        let spec = FeatureSpec::default();
        let f = spec.extract(&Plane::filled(30, 30, 7.0), &BBox::new(5.0, 5.0, 15.0, 15.0).unwrap());
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn faint_patches_are_not_amplified() {
        let spec = FeatureSpec::default();
        let mut p = Plane::filled(30, 30, 100.0);
        p.set(10, 10, 103.0);
        let f = spec.extract(&p, &BBox::new(5.0, 5.0, 15.0, 15.0).unwrap());
        let peak = f[..576].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak <= 3.0 / spec.min_contrast + 1e-12);
    }

    #[test]
    fn grid_crops_match_direct_extraction() {
        let spec = FeatureSpec::default();
        let plane = test_plane();
        let grid = WindowGrid::new(&spec, &plane, 12.8, 4);
        assert!(grid.cols > 2 && grid.rows > 1);
        for (c, r) in [(0, 0), (1, 0), (grid.cols - 1, grid.rows - 1), (2, 1)] {
            let direct = spec.extract(&plane, &grid.window(c, r));
            let fast = grid.features(c, r);
            for (a, b) in direct.iter().zip(&fast) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fast_responses_match_descriptor_dot_products() {
        let spec = FeatureSpec::default();
        let plane = test_plane();
        let grid = WindowGrid::new(&spec, &plane, 12.8, 4);
        let weights: Vec<f64> = (0..spec.dim()).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let fast = grid.responses(&weights, 0.3);
        assert_eq!(fast.len(), grid.rows * grid.cols);
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let x = grid.features(col, row);
                let direct = 0.3 + x.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>();
                let got = fast[row * grid.cols + col];
                assert!((direct - got).abs() < 1e-6 * (1.0 + direct.abs()), "{direct} vs {got}");
            }
        }
    }

    #[test]
    fn windows_stay_inside_the_image() {
        let spec = FeatureSpec::default();
        let plane = test_plane();
        let grid = WindowGrid::new(&spec, &plane, 12.8, 4);
        let last = grid.window(grid.cols - 1, grid.rows - 1);
        assert!(last.x2 <= 40.0 && last.y2 <= 30.0);
        assert!(WindowGrid::new(&spec, &plane, 50.0, 4).cols == 0);
    }
}
