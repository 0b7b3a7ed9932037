//! Training-mask dilation.
//!
//! With probability 0.2 an entity mask is replaced by its bounding box.
//! Otherwise it is blurred with an anisotropic Gaussian and thresholded
//! at a low level, which grows the support outward by a random margin.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

pub const BBOX_PROBABILITY: f64 = 0.2;
pub const THRESHOLDS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
pub const SIGMA_RANGE: (f64, f64) = (3.0, 17.0);

/// One random draw of the dilation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dilation {
    BoundingBox,
    Blur {
        /// Odd kernel side.
        kernel: usize,
        sigma_y: f64,
        sigma_x: f64,
        threshold: f64,
    },
}

impl Dilation {
    /// Draws parameters for an image whose larger side is `size`.
    pub fn draw<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        if rng.random_bool(BBOX_PROBABILITY) {
            return Self::BoundingBox;
        }
        let lo = (size as f64 / 15.0).ceil().max(1.0) as usize;
        let hi = ((size as f64 / 5.0).floor() as usize).max(lo);
        let mut kernel = rng.random_range(lo..=hi);
        if kernel % 2 == 0 {
            kernel += 1;
        }
        let sigma_y = rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1);
        let sigma_x = rng.random_range(SIGMA_RANGE.0..=SIGMA_RANGE.1);
        let threshold = THRESHOLDS[rng.random_range(0..THRESHOLDS.len())];
        Self::Blur {
            kernel,
            sigma_y,
            sigma_x,
            threshold,
        }
    }

    /// Applies the dilation. The result always contains `entity`.
    pub fn apply(&self, entity: &Mask) -> Result<Mask> {
        let Some((y0, x0, y1, x1)) = entity.bbox() else {
            return Err(Error::Mask("entity mask is empty".into()));
        };
        match *self {
            Self::BoundingBox => Ok(Mask::from_fn(entity.height, entity.width, |y, x| {
                (y0..=y1).contains(&y) && (x0..=x1).contains(&x)
            })),
            Self::Blur {
                kernel,
                sigma_y,
                sigma_x,
                threshold,
            } => {
                if kernel % 2 == 0 || !(sigma_y > 0.0 && sigma_x > 0.0) {
                    return Err(Error::Invalid(format!("bad blur parameters {self:?}")));
                }
                let blurred = gaussian_blur(entity, kernel, sigma_y, sigma_x);
                let bits = blurred
                    .iter()
                    .zip(entity.bits())
                    .map(|(&v, &e)| e || v > threshold)
                    .collect();
                Mask::from_bits(entity.height, entity.width, bits)
            }
        }
    }
}

/// Draws a dilation and applies it to `entity`.
pub fn sample_mask<R: Rng + ?Sized>(entity: &Mask, rng: &mut R) -> Result<Mask> {
    let size = entity.height.max(entity.width);
    Dilation::draw(size, rng).apply(entity)
}

/// Normalized 1-D Gaussian taps of odd length `kernel`.
pub fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as f64;
    let w: Vec<f64> = (0..kernel)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable blur of a binary mask with zero padding; same-size output.
pub fn gaussian_blur(mask: &Mask, kernel: usize, sigma_y: f64, sigma_x: f64) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let (ty, tx) = (gaussian_taps(kernel, sigma_y), gaussian_taps(kernel, sigma_x));
    let r = (kernel / 2) as isize;
    let src = mask.to_values();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in tx.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if (0..w as isize).contains(&xx) {
                    acc += t * src[y * w + xx as usize];
                }
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, t) in ty.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if (0..h as isize).contains(&yy) {
                    acc += t * rows[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}
