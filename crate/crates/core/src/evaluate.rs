//! Held-out reconstruction check.
//!
//! A trained model is asked to regenerate a known hole starting from a
//! partially noised copy of the true content. Its masked-region error is
//! compared with filling the hole by the mean visible color.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth_dataset;
use crate::diffusion::SamplerOpts;
use crate::error::{Error, Result};
use crate::mask_protocol::sample_mask;
use crate::model::LazyModel;
use crate::pipeline::{apply_edit, EditRequest};
use crate::raster::{Mask, RgbImage};

/// Fills the hole with the per-channel mean of the visible pixels.
pub fn mean_fill(image: &RgbImage, mask: &Mask) -> Result<RgbImage> {
    mask.expect_dims(image.height, image.width)?;
    let visible = mask.height * mask.width - mask.count();
    if visible == 0 {
        return Err(Error::Mask("no visible pixels to average".into()));
    }
    let mut out = image.clone();
    for c in 0..image.channels {
        let mut sum = 0.0;
        for y in 0..image.height {
            for x in 0..image.width {
                if !mask.get(y, x) {
                    sum += image.get(c, y, x);
                }
            }
        }
        let mean = sum / visible as f64;
        for y in 0..image.height {
            for x in 0..image.width {
                if mask.get(y, x) {
                    out.set(c, y, x, mean);
                }
            }
        }
    }
    Ok(out)
}

/// Mean squared error over the masked pixels, all channels.
pub fn masked_mse(a: &RgbImage, b: &RgbImage, mask: &Mask) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Shape("images differ in shape".into()));
    }
    mask.expect_dims(a.height, a.width)?;
    if mask.is_empty() {
        return Err(Error::EmptyHole);
    }
    let mut s = 0.0;
    for c in 0..a.channels {
        for y in 0..a.height {
            for x in 0..a.width {
                if mask.get(y, x) {
                    s += (a.get(c, y, x) - b.get(c, y, x)).powi(2);
                }
            }
        }
    }
    Ok(s / (mask.count() * a.channels) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionCase {
    pub mask_ratio: f64,
    pub model_mse: f64,
    pub mean_fill_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub cases: Vec<ReconstructionCase>,
}

impl ReconstructionReport {
    /// Fraction of cases where the model beats mean fill.
    pub fn win_rate(&self) -> f64 {
        let wins = self.cases.iter().filter(|c| c.model_mse < c.mean_fill_mse).count();
        wins as f64 / self.cases.len().max(1) as f64
    }
}

/// Runs `samples` held-out reconstructions drawn with `seed`. Masks come
/// from the training dilation protocol; each edit uses the sampler seed of
/// its index.
pub fn reconstruction_eval(
    model: &LazyModel,
    samples: usize,
    seed: u64,
    opts: SamplerOpts,
) -> Result<ReconstructionReport> {
    let cfg = &model.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x686f_6c64);
    let mut cases = Vec::with_capacity(samples);
    for (i, s) in synth_dataset(samples, cfg.canvas, cfg.codec.factor(), seed)?.enumerate() {
        let pick = rng.random_range(0..s.entities.len());
        let mask = sample_mask(&s.entities[pick], &mut rng)?;
        if mask.count() == mask.height * mask.width {
            continue;
        }
        let req = EditRequest {
            mask: mask.clone(),
            label: s.labels[pick],
            opts: SamplerOpts {
                seed: opts.seed.wrapping_add(i as u64),
                ..opts
            },
        };
        let out = apply_edit(model, &s.image, &req, &mut |_| {})?;
        cases.push(ReconstructionCase {
            mask_ratio: mask.ratio(),
            model_mse: masked_mse(&out.canvas, &s.image, &mask)?,
            mean_fill_mse: masked_mse(&mean_fill(&s.image, &mask)?, &s.image, &mask)?,
        });
    }
    Ok(ReconstructionReport { cases })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_fill_and_mse() {
        let img = RgbImage::from_fn(3, 4, 4, |c, y, _| if y < 2 { 0.2 * c as f64 } else { 1.0 });
        let mask = Mask::from_fn(4, 4, |y, _| y >= 2);
        let filled = mean_fill(&img, &mask).unwrap();
        assert!((filled.get(1, 3, 3) - 0.2).abs() < 1e-12);
        let mse = masked_mse(&filled, &img, &mask).unwrap();
        let want = ((1.0f64).powi(2) + 0.8f64.powi(2) + 0.6f64.powi(2)) / 3.0;
        assert!((mse - want).abs() < 1e-12);
        assert!(masked_mse(&img, &img, &Mask::empty(4, 4)).is_err());
        assert!(mean_fill(&img, &Mask::full(4, 4)).is_err());
    }
}
