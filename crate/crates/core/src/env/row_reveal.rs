//! Bandwidth-limited image classification with an exact per-class Bernoulli
//! pixel model. The latent state is the image class; each observation is one
//! row of binary pixels.

use std::path::Path;

use rand::Rng;

use super::{EnvError, Result};
use crate::belief::DiscreteBelief;

/// Per-class, per-pixel Bernoulli parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPixelModel {
    num_classes: usize,
    rows: usize,
    cols: usize,
    /// `probs[(class * rows + row) * cols + col]`
    probs: Vec<f64>,
}

impl ClassPixelModel {
    pub fn new(num_classes: usize, rows: usize, cols: usize, probs: Vec<f64>) -> Result<Self> {
        if num_classes == 0 || rows == 0 || cols == 0 {
            return Err(EnvError::InvalidConfig("empty pixel model".into()));
        }
        if probs.len() != num_classes * rows * cols {
            return Err(EnvError::InvalidConfig(format!(
                "expected {} pixel parameters, got {}",
                num_classes * rows * cols,
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(EnvError::InvalidConfig(format!("Bernoulli parameter {p} outside [0, 1]")));
        }
        Ok(Self {
            num_classes,
            rows,
            cols,
            probs,
        })
    }

    /// Model from binary templates: `p_on` on template pixels, `p_off` elsewhere.
    pub fn from_templates(templates: &[Vec<Vec<bool>>], p_on: f64, p_off: f64) -> Result<Self> {
        let Some(first) = templates.first() else {
            return Err(EnvError::InvalidConfig("no templates".into()));
        };
        let rows = first.len();
        let cols = first.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(templates.len() * rows * cols);
        for t in templates {
            if t.len() != rows || t.iter().any(|r| r.len() != cols) {
                return Err(EnvError::InvalidConfig("templates differ in shape".into()));
            }
            for row in t {
                probs.extend(row.iter().map(|&on| if on { p_on } else { p_off }));
            }
        }
        Self::new(templates.len(), rows, cols, probs)
    }

    /// Synthetic glyphs: seven-segment digits for the first ten classes, then
    /// seeded random bar patterns.
    pub fn synthetic_glyphs(num_classes: usize, rows: usize, cols: usize, p_on: f64, p_off: f64) -> Result<Self> {
        let templates: Vec<_> = (0..num_classes).map(|k| glyph_template(k, rows, cols)).collect();
        Self::from_templates(&templates, p_on, p_off)
    }

    /// Maximum-likelihood Bernoulli parameters with add-`smoothing` counts.
    pub fn fit(
        images: &[Vec<bool>],
        labels: &[usize],
        num_classes: usize,
        rows: usize,
        cols: usize,
        smoothing: f64,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(EnvError::InvalidConfig("image and label counts differ".into()));
        }
        let mut on = vec![0.0; num_classes * rows * cols];
        let mut count = vec![0.0; num_classes];
        for (img, &label) in images.iter().zip(labels) {
            if label >= num_classes || img.len() != rows * cols {
                return Err(EnvError::InvalidConfig(format!("bad sample with label {label}")));
            }
            count[label] += 1.0;
            for (i, &px) in img.iter().enumerate() {
                if px {
                    on[label * rows * cols + i] += 1.0;
                }
            }
        }
        let probs = on
            .iter()
            .enumerate()
            .map(|(i, &n)| (n + smoothing) / (count[i / (rows * cols)] + 2.0 * smoothing))
            .collect();
        Self::new(num_classes, rows, cols, probs)
    }

    /// Fits a model from flat row-major byte files: `images` holds
    /// `rows * cols` bytes per image (non-zero = on), `labels` one byte per image.
    pub fn load_flat(images: &Path, labels: &Path, num_classes: usize, rows: usize, cols: usize) -> Result<Self> {
        let pixel_bytes = std::fs::read(images)?;
        let label_bytes = std::fs::read(labels)?;
        let size = rows * cols;
        if size == 0 || pixel_bytes.len() % size != 0 || pixel_bytes.len() / size != label_bytes.len() {
            return Err(EnvError::InvalidConfig(format!(
                "{} pixel bytes do not match {} labels of {rows}x{cols}",
                pixel_bytes.len(),
                label_bytes.len()
            )));
        }
        let images: Vec<Vec<bool>> = pixel_bytes
            .chunks(size)
            .map(|c| c.iter().map(|&b| b != 0).collect())
            .collect();
        let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
        Self::fit(&images, &labels, num_classes, rows, cols, 1.0)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixel_prob(&self, class: usize, row: usize, col: usize) -> f64 {
        self.probs[(class * self.rows + row) * self.cols + col]
    }

    pub fn sample_image<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<Vec<bool>> {
        (0..self.rows)
            .map(|r| {
                (0..self.cols)
                    .map(|c| rng.random::<f64>() < self.pixel_prob(class, r, c))
                    .collect()
            })
            .collect()
    }

    /// `ln p(pixels | class, row)`.
    pub fn row_log_likelihood(&self, class: usize, row: usize, pixels: &[bool]) -> f64 {
        pixels
            .iter()
            .enumerate()
            .map(|(c, &on)| {
                let p = self.pixel_prob(class, row, c);
                if on {
                    p.ln()
                } else {
                    (1.0 - p).ln()
                }
            })
            .sum()
    }

    /// Row log-likelihoods for every class: `out[row][class]`.
    pub fn image_row_log_likelihoods(&self, image: &[Vec<bool>]) -> Vec<Vec<f64>> {
        (0..self.rows)
            .map(|r| {
                (0..self.num_classes)
                    .map(|k| self.row_log_likelihood(k, r, &image[r]))
                    .collect()
            })
            .collect()
    }
}

/// Normalizes class log-weights into a belief; `-inf` everywhere gives uniform.
pub(crate) fn softmax_belief(log_weights: &[f64]) -> DiscreteBelief {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return DiscreteBelief::uniform(log_weights.len());
    }
    let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
    DiscreteBelief::from_weights(w).expect("max term is 1")
}

/// Exact class posterior under a uniform class prior given revealed rows.
pub fn row_reveal_class_posterior(model: &ClassPixelModel, revealed: &[(usize, &[bool])]) -> DiscreteBelief {
    let mut logw = vec![0.0; model.num_classes];
    for &(row, pixels) in revealed {
        for (k, lw) in logw.iter_mut().enumerate() {
            *lw += model.row_log_likelihood(k, row, pixels);
        }
    }
    softmax_belief(&logw)
}

/// One classification episode: a true class and an image sampled from its model.
#[derive(Debug, Clone)]
pub struct RowRevealEnv {
    pub true_class: usize,
    pub true_image: Vec<Vec<bool>>,
}

impl RowRevealEnv {
    pub fn reset<R: Rng + ?Sized>(model: &ClassPixelModel, rng: &mut R) -> Self {
        let true_class = rng.random_range(0..model.num_classes());
        let true_image = model.sample_image(true_class, rng);
        Self {
            true_class,
            true_image,
        }
    }

    /// Episode length equals the number of rows.
    pub fn horizon(&self) -> usize {
        self.true_image.len()
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.true_image[r]
    }
}

const SEGMENTS: [[bool; 7]; 10] = [
    // a (top), b (top right), c (bottom right), d (bottom), e (bottom left), f (top left), g (middle)
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn glyph_template(class: usize, rows: usize, cols: usize) -> Vec<Vec<bool>> {
    let mut img = vec![vec![false; cols]; rows];
    let top = rows / 6;
    let bottom = rows - 1 - rows / 6;
    let mid = rows / 2;
    let left = cols / 4;
    let right = cols - 1 - cols / 4;
    let thick = (rows / 14).max(1);
    let hbar = |img: &mut Vec<Vec<bool>>, y: usize| {
        for row in img.iter_mut().skip(y).take(thick) {
            for px in row.iter_mut().take(right + 1).skip(left) {
                *px = true;
            }
        }
    };
    let vbar = |img: &mut Vec<Vec<bool>>, x: usize, y0: usize, y1: usize| {
        for row in img.iter_mut().take(y1 + 1).skip(y0) {
            for px in row.iter_mut().skip(x).take(thick) {
                *px = true;
            }
        }
    };
    if class < SEGMENTS.len() {
        let s = SEGMENTS[class];
        let rx = right + 1 - thick;
        if s[0] {
            hbar(&mut img, top);
        }
        if s[1] {
            vbar(&mut img, rx, top, mid);
        }
        if s[2] {
            vbar(&mut img, rx, mid, bottom);
        }
        if s[3] {
            hbar(&mut img, bottom + 1 - thick);
        }
        if s[4] {
            vbar(&mut img, left, mid, bottom);
        }
        if s[5] {
            vbar(&mut img, left, top, mid);
        }
        if s[6] {
            hbar(&mut img, mid);
        }
    } else {
        // deterministic pseudo-random bars keyed by class
        let mut state = 0x9E37_79B9_7F4A_7C15u64 ^ (class as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..4 {
            let y = top + (next() as usize) % (bottom - top);
            if next() % 2 == 0 {
                hbar(&mut img, y);
            } else {
                let x = left + (next() as usize) % (right - left);
                let y1 = (y + rows / 3).min(bottom);
                vbar(&mut img, x, y, y1);
            }
        }
    }
    img
}
