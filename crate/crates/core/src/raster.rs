//! Planar images, binary masks, and their PNG / run-length encodings.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage as PngRgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel-major grid of values: `data[(ch * height + y) * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Planes {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Latent image (`c` channels at reduced resolution).
pub type LatentImage = Planes;
/// RGB image with values in `[0, 1]`.
pub type RgbImage = Planes;

impl Planes {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} planes need {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Pixels where `mask` is set are replaced by zero (`I ⊙ (1 - M)`).
    pub fn masked_out(&self, mask: &Mask) -> Result<Self> {
        mask.expect_dims(self.height, self.width)?;
        let mut out = self.clone();
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    if mask.get(y, x) {
                        out.set(c, y, x, 0.0);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Copies the `h x w` window starting at `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Index(format!(
                "crop {h}x{w}@({y0},{x0}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(self.channels, h, w, |c, y, x| {
            self.get(c, y0 + y, x0 + x)
        }))
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> Self {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let sy = self.height as f64 / h as f64;
        let sx = self.width as f64 / w as f64;
        let sample = |src: f64, n: usize| {
            let s = (src.max(0.0)).min((n - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, s - i0 as f64)
        };
        Self::from_fn(self.channels, h, w, |c, y, x| {
            let (y0, y1, fy) = sample((y as f64 + 0.5) * sy - 0.5, self.height);
            let (x0, x1, fx) = sample((x as f64 + 0.5) * sx - 0.5, self.width);
            let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
            let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("image value at flat index {i}"))),
            None => Ok(()),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Quantizes to 8-bit RGB. Requires three channels.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::Shape(format!(
                "PNG export needs 3 channels, got {}",
                self.channels
            )));
        }
        let img = PngRgb::from_fn(self.width as u32, self.height as u32, |x, y| {
            let q = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(3, h, w, |c, y, x| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        }))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

/// Binary mask; `true` marks a hole pixel to regenerate.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Accepts only exact 0/1 values.
    pub fn from_values(height: usize, width: usize, values: &[f64]) -> Result<Self> {
        let bits = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0.0 {
                    Ok(false)
                } else if v == 1.0 {
                    Ok(true)
                } else {
                    Err(Error::Mask(format!("value {v} at {i} is not binary")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_bits(height, width, bits)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn ratio(&self) -> f64 {
        self.count() as f64 / self.bits.len().max(1) as f64
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn expect_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::Shape(format!(
                "mask is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// Inclusive bounding box `(y0, x0, y1, x1)` of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((a, b, c, d)) => (a.min(y), b.min(x), c.max(y), d.max(x)),
                    });
                }
            }
        }
        bb
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        other.expect_dims(self.height, self.width)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Self::from_bits(self.height, self.width, bits)
    }

    pub fn intersects(&self, other: &Self) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }

    /// True when every set pixel of `other` is also set here.
    pub fn contains(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bits.iter().zip(&other.bits).all(|(a, b)| *a || !*b)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Index("mask crop out of bounds".into()));
        }
        Ok(Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }

    /// Resamples so that a target pixel is set when any source pixel in
    /// its footprint is set. Holes never vanish when shrinking.
    pub fn resize_any(&self, h: usize, w: usize) -> Self {
        let span = |i: usize, n: usize, src: usize| {
            let lo = i * src / n;
            let hi = ((i + 1) * src).div_ceil(n).max(lo + 1).min(src);
            lo..hi
        };
        Self::from_fn(h, w, |y, x| {
            span(y, h, self.height).any(|yy| span(x, w, self.width).any(|xx| self.get(yy, xx)))
        })
    }

    /// Run-length encoding, alternating runs starting with unset pixels.
    pub fn to_rle(&self) -> MaskRle {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        MaskRle {
            height: self.height,
            width: self.width,
            runs,
        }
    }

    pub fn from_rle(rle: &MaskRle) -> Result<Self> {
        let mut bits = Vec::with_capacity(rle.height * rle.width);
        let mut v = false;
        for &r in &rle.runs {
            bits.extend(std::iter::repeat_n(v, r as usize));
            v = !v;
        }
        Self::from_bits(rle.height, rle.width, bits)
    }

    /// Grayscale PNG; nonzero pixels are holes.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Any PNG; a pixel is a hole when its luminance is at least half scale.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0[0] >= 128))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn non_binary_values_rejected() {
        assert!(Mask::from_values(1, 3, &[0.0, 1.0, 0.5]).is_err());
        assert_eq!(Mask::from_values(1, 2, &[0.0, 1.0]).unwrap().count(), 1);
    }

    #[test]
    fn bbox_of_scattered_pixels() {
        let mut m = Mask::empty(8, 8);
        m.set(2, 5, true);
        m.set(6, 1, true);
        assert_eq!(m.bbox(), Some((2, 1, 6, 5)));
        assert_eq!(Mask::empty(3, 3).bbox(), None);
    }

    #[test]
    fn png_round_trip_of_quantized_image() {
        let img = Planes::from_fn(3, 5, 7, |c, y, x| ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0);
        let back = Planes::from_png_bytes(&img.to_png_bytes().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let img = Planes::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f64);
        assert_eq!(img.resize_bilinear(4, 4), img);
        let c = Planes::filled(2, 6, 6, 0.25).resize_bilinear(3, 3).resize_bilinear(6, 6);
        assert!(c.data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn resize_any_keeps_single_pixels() {
        let m = Mask::from_fn(20, 20, |y, x| y == 13 && x == 7);
        let small = m.resize_any(16, 16);
        assert!((1..=4).contains(&small.count()));
        let same = m.resize_any(20, 20);
        assert_eq!(same, m);
        assert_eq!(Mask::full(7, 9).resize_any(3, 4), Mask::full(3, 4));
    }

    proptest! {
        #[test]
        fn rle_and_png_round_trip(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let m = Mask::from_fn(h, w, |y, x| (seed >> ((y * w + x) % 64)) & 1 == 1);
            prop_assert_eq!(Mask::from_rle(&m.to_rle()).unwrap(), m.clone());
            prop_assert_eq!(Mask::from_png_bytes(&m.to_png_bytes().unwrap()).unwrap(), m);
        }
    }
}
