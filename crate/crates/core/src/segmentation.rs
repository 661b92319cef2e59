//! Unsupervised EM/MPM segmentation under a Potts prior.
//!
//! The E-step is approximated by Gibbs sampling of the label field with
//! per-class Gaussian likelihoods and a 4-neighbour Potts interaction `beta`.
//! Posterior marginals are estimated from label counts over the second half
//! of the sweeps; the M-step refits class means and deviations from those
//! marginals. The returned labels maximize the final marginals (MPM).

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmMpmParams {
    pub num_classes: usize,
    pub potts_beta: f64,
    pub em_iterations: usize,
    pub gibbs_sweeps_per_em: usize,
    /// Restarts with jittered means when a class empties.
    pub max_restarts: usize,
    pub rng_seed: u64,
}

impl Default for EmMpmParams {
    fn default() -> Self {
        Self {
            num_classes: 3,
            potts_beta: 1.0,
            em_iterations: 5,
            gibbs_sweeps_per_em: 8,
            max_restarts: 3,
            rng_seed: 0,
        }
    }
}

impl EmMpmParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("segmentation: num_classes must be >= 2".into()));
        }
        if self.em_iterations == 0 || self.gibbs_sweeps_per_em == 0 {
            return Err(Error::Config(
                "segmentation: em_iterations and gibbs_sweeps_per_em must be >= 1".into(),
            ));
        }
        if !(self.potts_beta >= 0.0) {
            return Err(Error::Config("segmentation: potts_beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Debug rendering: label index scaled to spread over 0..=255.
    pub fn to_image(&self) -> GrayImage {
        let step = 255 / (self.num_classes.max(2) - 1) as u32;
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([(self.get(x as usize, y as usize) as u32 * step).min(255) as u8])
        })
    }

    /// Mean image intensity of each class; `None` for classes with no pixels.
    pub fn class_means(&self, image: &GrayImage) -> Vec<Option<f64>> {
        let mut sum = vec![0.0; self.num_classes];
        let mut count = vec![0usize; self.num_classes];
        for (l, v) in self.labels.iter().zip(image.as_raw()) {
            sum[*l as usize] += f64::from(*v);
            count[*l as usize] += 1;
        }
        sum.iter()
            .zip(&count)
            .map(|(s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }
}

/// Outcome of [`emmpm_segment_with_model`]: labels plus fitted class model.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub labels: LabelMap,
    pub means: Vec<f64>,
    pub sigmas: Vec<f64>,
}

const SIGMA_FLOOR: f64 = 0.5;
/// A class holding less than this much marginal mass counts as empty.
const EMPTY_MASS: f64 = 0.5;

pub fn emmpm_segment(image: &GrayImage, params: &EmMpmParams) -> Result<LabelMap> {
    emmpm_segment_with_model(image, params).map(|s| s.labels)
}

pub fn emmpm_segment_with_model(image: &GrayImage, params: &EmMpmParams) -> Result<Segmentation> {
    params.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Config("segmentation: empty image".into()));
    }
    if params.num_classes > u8::MAX as usize {
        return Err(Error::Config("segmentation: too many classes".into()));
    }
    let pixels: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    let mut sorted = pixels.clone();
    sorted.sort_by(f64::total_cmp);
    let distinct = {
        let mut d = sorted.clone();
        d.dedup();
        d
    };

    if distinct.len() < params.num_classes {
        // The data cannot support k classes: one class per gray level.
        let labels = pixels
            .iter()
            .map(|v| distinct.partition_point(|d| d < v) as u8)
            .collect();
        return Ok(collapsed(labels, &pixels, w, h, params.num_classes));
    }

    let mut last_failure = 0;
    for attempt in 0..=params.max_restarts {
        let means = initial_means(&sorted, params.num_classes, attempt, &mut rng);
        match run_em(&pixels, w, h, params, means, &mut rng) {
            Ok(seg) => return Ok(seg),
            Err(class) => last_failure = class,
        }
    }
    Err(Error::EmptyClass {
        class: last_failure,
        retries: params.max_restarts,
    })
}

/// Class means at evenly spaced quantiles `(c + 0.5) / k`; restarts jitter
/// them by a few gray levels.
fn initial_means(sorted: &[f64], k: usize, attempt: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = sorted.len();
    let mut means: Vec<f64> = (0..k)
        .map(|c| {
            let q = (c as f64 + 0.5) / k as f64;
            sorted[((q * n as f64) as usize).min(n - 1)]
        })
        .collect();
    if attempt > 0 {
        let spread = 4.0 * attempt as f64;
        for m in means.iter_mut() {
            *m += rng.random_range(-spread..=spread);
        }
    }
    means
}

fn collapsed(labels: Vec<u8>, pixels: &[f64], w: usize, h: usize, k: usize) -> Segmentation {
    let labels = LabelMap {
        width: w,
        height: h,
        num_classes: k,
        labels,
    };
    let mut means = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (l, v) in labels.labels.iter().zip(pixels) {
        means[*l as usize] += v;
        counts[*l as usize] += 1;
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            *m /= c as f64;
        }
    }
    Segmentation {
        labels,
        means,
        sigmas: vec![SIGMA_FLOOR; k],
    }
}

/// Runs EM to completion, or reports the first class that emptied.
fn run_em(
    pixels: &[f64],
    w: usize,
    h: usize,
    params: &EmMpmParams,
    mut means: Vec<f64>,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Segmentation, usize> {
    let k = params.num_classes;
    let n = pixels.len();
    let global_mean = pixels.iter().sum::<f64>() / n as f64;
    let global_var = pixels.iter().map(|v| (v - global_mean).powi(2)).sum::<f64>() / n as f64;
    let mut sigmas = vec![(global_var.sqrt() / k as f64).max(SIGMA_FLOOR); k];

    // nearest-mean start
    let mut labels: Vec<u8> = pixels
        .iter()
        .map(|&v| {
            (0..k)
                .min_by(|&a, &b| (v - means[a]).abs().total_cmp(&(v - means[b]).abs()))
                .unwrap() as u8
        })
        .collect();

    let mut counts = vec![0u16; n * k];
    let mut log_norm = vec![0.0; k];
    let mut inv_var = vec![0.0; k];
    let mut probs = vec![0.0; k];
    let burn_in = params.gibbs_sweeps_per_em / 2;

    for _ in 0..params.em_iterations {
        for c in 0..k {
            log_norm[c] = sigmas[c].ln();
            inv_var[c] = 0.5 / (sigmas[c] * sigmas[c]);
        }
        counts.iter_mut().for_each(|c| *c = 0);
        for sweep in 0..params.gibbs_sweeps_per_em {
            // checkerboard schedule: all "black" sites, then all "white" sites
            for color in 0..2 {
                for y in 0..h {
                    let start = (y + color) % 2;
                    for x in (start..w).step_by(2) {
                        let i = y * w + x;
                        let v = pixels[i];
                        let mut neigh = [0u8; 4];
                        let mut nn = 0;
                        if x > 0 {
                            neigh[nn] = labels[i - 1];
                            nn += 1;
                        }
                        if x + 1 < w {
                            neigh[nn] = labels[i + 1];
                            nn += 1;
                        }
                        if y > 0 {
                            neigh[nn] = labels[i - w];
                            nn += 1;
                        }
                        if y + 1 < h {
                            neigh[nn] = labels[i + w];
                            nn += 1;
                        }
                        let mut best = f64::NEG_INFINITY;
                        for c in 0..k {
                            let disagree = neigh[..nn].iter().filter(|&&l| l as usize != c).count();
                            let e = -(v - means[c]).powi(2) * inv_var[c]
                                - log_norm[c]
                                - params.potts_beta * disagree as f64;
                            probs[c] = e;
                            best = best.max(e);
                        }
                        let mut total = 0.0;
                        for p in probs.iter_mut() {
                            *p = (*p - best).exp();
                            total += *p;
                        }
                        let mut u = rng.random::<f64>() * total;
                        let mut chosen = k - 1;
                        for (c, p) in probs.iter().enumerate() {
                            if u < *p {
                                chosen = c;
                                break;
                            }
                            u -= p;
                        }
                        labels[i] = chosen as u8;
                    }
                }
            }
            if sweep >= burn_in {
                for (i, &l) in labels.iter().enumerate() {
                    counts[i * k + l as usize] += 1;
                }
            }
        }

        // M-step from the estimated marginals
        let recorded = (params.gibbs_sweeps_per_em - burn_in) as f64;
        let mut mass = vec![0.0; k];
        let mut first = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                let p = f64::from(counts[i * k + c]) / recorded;
                if p > 0.0 {
                    mass[c] += p;
                    first[c] += p * pixels[i];
                }
            }
        }
        if let Some(empty) = (0..k).find(|&c| mass[c] < EMPTY_MASS) {
            return Err(empty);
        }
        for c in 0..k {
            means[c] = first[c] / mass[c];
        }
        let mut second = vec![0.0; k];
        for i in 0..n {
            for c in 0..k {
                let p = f64::from(counts[i * k + c]) / recorded;
                if p > 0.0 {
                    second[c] += p * (pixels[i] - means[c]).powi(2);
                }
            }
        }
        for c in 0..k {
            sigmas[c] = (second[c] / mass[c]).sqrt().max(SIGMA_FLOOR);
        }
    }

    Ok(Segmentation {
        labels: LabelMap {
            width: w,
            height: h,
            num_classes: k,
            labels: mpm_labels(&counts, k, n),
        },
        means,
        sigmas,
    })
}

/// Most frequent recorded label per pixel; ties go to the lower class.
fn mpm_labels(counts: &[u16], k: usize, n: usize) -> Vec<u8> {
    (0..n)
        .map(|i| {
            let row = &counts[i * k..(i + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Binary mask of the darkest class (fibers are dark on a bright matrix).
pub fn class_mask(labels: &LabelMap, image: &GrayImage) -> Vec<bool> {
    let means = labels.class_means(image);
    let fiber = means
        .iter()
        .enumerate()
        .filter_map(|(c, m)| m.map(|m| (c, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c as u8);
    match fiber {
        Some(f) => labels.labels.iter().map(|&l| l == f).collect(),
        None => vec![false; labels.labels.len()],
    }
}
