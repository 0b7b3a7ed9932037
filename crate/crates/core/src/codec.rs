//! Pixel <-> latent codecs.
//!
//! `Pool` averages `factor x factor` pixel blocks, maps them from `[0, 1]`
//! to `[-1, 1]` and lifts the 3 colour channels to 4 latent channels with a
//! fixed matrix whose columns are orthonormal. Decoding applies the
//! transpose and repeats each latent cell over its block, so block-constant
//! images survive a round trip exactly (up to rounding).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{LatentImage, RgbImage};

/// Columns are orthonormal: `LIFTᵀ · LIFT = I₃`.
const LIFT: [[f64; 3]; 4] = [
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentCodec {
    /// Latent is the image itself (3 channels, factor 1).
    Identity,
    Pool { factor: usize },
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self::toy()
    }
}

impl LatentCodec {
    pub const LATENT_CHANNELS: usize = 4;

    pub fn toy() -> Self {
        Self::Pool { factor: 2 }
    }

    /// 8x reduction with 4 channels.
    pub fn full() -> Self {
        Self::Pool { factor: 8 }
    }

    pub fn factor(&self) -> usize {
        match *self {
            Self::Identity => 1,
            Self::Pool { factor } => factor,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::Identity => 3,
            Self::Pool { .. } => Self::LATENT_CHANNELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor() == 0 {
            return Err(Error::Config("codec factor must be positive".into()));
        }
        Ok(())
    }

    /// Latent size for an `h x w` image.
    pub fn latent_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let f = self.factor();
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible by codec factor {f}"
            )));
        }
        Ok((h / f, w / f))
    }

    pub fn encode(&self, image: &RgbImage) -> Result<LatentImage> {
        if image.channels != 3 {
            return Err(Error::Shape(format!(
                "codec expects RGB, got {} channels",
                image.channels
            )));
        }
        let (lh, lw) = self.latent_dims(image.height, image.width)?;
        match *self {
            Self::Identity => Ok(image.clone()),
            Self::Pool { factor } => {
                let area = (factor * factor) as f64;
                let mut pooled = [0.0; 3];
                let mut out = LatentImage::zeros(Self::LATENT_CHANNELS, lh, lw);
                for y in 0..lh {
                    for x in 0..lw {
                        for (c, p) in pooled.iter_mut().enumerate() {
                            let mut s = 0.0;
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    s += image.get(c, y * factor + dy, x * factor + dx);
                                }
                            }
                            *p = 2.0 * (s / area) - 1.0;
                        }
                        for (l, row) in LIFT.iter().enumerate() {
                            out.set(l, y, x, row[0] * pooled[0] + row[1] * pooled[1] + row[2] * pooled[2]);
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn decode(&self, latent: &LatentImage) -> Result<RgbImage> {
        if latent.channels != self.channels() {
            return Err(Error::Shape(format!(
                "codec expects {} latent channels, got {}",
                self.channels(),
                latent.channels
            )));
        }
        self.validate()?;
        match *self {
            Self::Identity => Ok(latent.clone()),
            Self::Pool { factor } => {
                let mut rgb = RgbImage::zeros(3, latent.height, latent.width);
                for y in 0..latent.height {
                    for x in 0..latent.width {
                        for c in 0..3 {
                            let q: f64 = (0..Self::LATENT_CHANNELS)
                                .map(|l| LIFT[l][c] * latent.get(l, y, x))
                                .sum();
                            rgb.set(c, y, x, (q + 1.0) * 0.5);
                        }
                    }
                }
                Ok(RgbImage::from_fn(
                    3,
                    latent.height * factor,
                    latent.width * factor,
                    |c, y, x| rgb.get(c, y / factor, x / factor),
                ))
            }
        }
    }

    /// Decodes a scattered hole latent on a black background: pixels whose
    /// latent cell is exactly zero in every channel are left at 0.
    pub fn zero_pad_decode(&self, hole: &LatentImage) -> Result<RgbImage> {
        let mut out = self.decode(hole)?;
        let f = self.factor();
        for y in 0..out.height {
            for x in 0..out.width {
                let empty = (0..hole.channels).all(|l| hole.get(l, y / f, x / f) == 0.0);
                if empty {
                    for c in 0..3 {
                        out.set(c, y, x, 0.0);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Operation count for one encode plus one decode of an `h x w` image.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let pixels = (h * w) as u64;
        match *self {
            Self::Identity => 0,
            Self::Pool { factor } => {
                let cells = pixels / (factor * factor) as u64;
                // pool + affine map, lift, un-lift, affine map back, upsample copy
                3 * pixels + 6 * cells + 2 * 12 * cells + 2 * 12 * cells + 6 * cells + 3 * pixels
            }
        }
    }
}
