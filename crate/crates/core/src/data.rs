//! Synthetic shapes dataset.
//!
//! Each canvas holds one to four flat-colored shapes on a smooth textured
//! background. Every shape carries its own entity mask and class label.
//! Labels are drawn from a shuffled bag holding each class once, so class
//! counts over any prefix of the stream differ by at most one.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Square,
    Disc,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Square, Self::Disc, Self::Triangle, Self::Cross];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Disc => "disc",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }

    /// Whether the unit-box point `(u, v) ∈ [0,1]²` lies inside the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Self::Square => (0.1..=0.9).contains(&u) && (0.1..=0.9).contains(&v),
            Self::Disc => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.22,
            Self::Triangle => u >= 0.05 && (v - 0.5).abs() <= 0.5 * u,
            Self::Cross => (u - 0.5).abs() <= 0.17 || (v - 0.5).abs() <= 0.17,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: RgbImage,
    /// One pairwise-disjoint mask per shape.
    pub entities: Vec<Mask>,
    pub labels: Vec<usize>,
}

/// Deterministic stream of `n` samples.
#[derive(Debug, Clone)]
pub struct SynthStream {
    rng: ChaCha8Rng,
    canvas: usize,
    remaining: usize,
    bag: Vec<usize>,
}

/// `canvas` must be a positive multiple of `factor` and at least 8 pixels.
pub fn synth_dataset(n: usize, canvas: usize, factor: usize, seed: u64) -> Result<SynthStream> {
    if factor == 0 || !canvas.is_multiple_of(factor) || canvas < 8 {
        return Err(Error::Config(format!(
            "canvas {canvas} must be at least 8 and divisible by codec factor {factor}"
        )));
    }
    Ok(SynthStream {
        rng: ChaCha8Rng::seed_from_u64(seed),
        canvas,
        remaining: n,
        bag: Vec::new(),
    })
}

impl SynthStream {
    fn next_label(&mut self) -> usize {
        if self.bag.is_empty() {
            self.bag = ShapeClass::ALL.iter().map(|c| c.id()).collect();
            self.bag.shuffle(&mut self.rng);
        }
        self.bag.pop().expect("refilled above")
    }

    fn background(&mut self) -> RgbImage {
        let s = self.canvas as f64;
        let base: [f64; 3] = std::array::from_fn(|_| self.rng.random_range(0.25..0.75));
        let tilt: [f64; 3] = std::array::from_fn(|_| self.rng.random_range(-0.15..0.15));
        let angle = self.rng.random_range(0.0..std::f64::consts::TAU);
        let freq = self.rng.random_range(2.0..5.0) * std::f64::consts::TAU / s;
        let (ca, sa) = (angle.cos(), angle.sin());
        RgbImage::from_fn(3, self.canvas, self.canvas, |c, y, x| {
            let (yf, xf) = (y as f64, x as f64);
            let ramp = tilt[c] * (yf / s - 0.5);
            let stripes = 0.04 * ((xf * ca + yf * sa) * freq).sin();
            (base[c] + ramp + stripes).clamp(0.0, 1.0)
        })
    }
}

impl Iterator for SynthStream {
    type Item = SyntheticSample;

    fn next(&mut self) -> Option<SyntheticSample> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let size = self.canvas;
        let mut image = self.background();
        let mut occupied = Mask::empty(size, size);
        let mut entities = Vec::new();
        let mut labels = Vec::new();
        let wanted = self.rng.random_range(1..=4);
        let (lo, hi) = (size / 4, (size * 7 / 16).max(size / 4 + 1));
        for _ in 0..wanted {
            let label = self.next_label();
            let class = ShapeClass::from_id(label).expect("bag holds valid ids");
            let mut placed = false;
            for _ in 0..30 {
                let side = self.rng.random_range(lo..=hi);
                let y0 = self.rng.random_range(0..=size - side);
                let x0 = self.rng.random_range(0..=size - side);
                let m = Mask::from_fn(size, size, |y, x| {
                    y >= y0
                        && x >= x0
                        && y < y0 + side
                        && x < x0 + side
                        && class.covers(
                            (y - y0) as f64 / (side - 1) as f64,
                            (x - x0) as f64 / (side - 1) as f64,
                        )
                });
                // Keep a one-pixel gap so entities never touch.
                let halo = Mask::from_fn(size, size, |y, x| {
                    (y.saturating_sub(1)..=(y + 1).min(size - 1))
                        .any(|yy| (x.saturating_sub(1)..=(x + 1).min(size - 1)).any(|xx| m.get(yy, xx)))
                });
                if m.is_empty() || halo.intersects(&occupied) {
                    continue;
                }
                let color: [f64; 3] = std::array::from_fn(|_| self.rng.random_range(0.0..1.0));
                for y in 0..size {
                    for x in 0..size {
                        if m.get(y, x) {
                            for (c, &v) in color.iter().enumerate() {
                                image.set(c, y, x, v);
                            }
                        }
                    }
                }
                occupied = occupied.union(&m).expect("same dims");
                entities.push(m);
                labels.push(label);
                placed = true;
                break;
            }
            if !placed {
                // Return the label so the bag stays balanced.
                self.bag.push(label);
                break;
            }
        }
        Some(SyntheticSample {
            image,
            entities,
            labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}
