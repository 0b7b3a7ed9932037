//! Overlapping patch grid over a latent image.
//!
//! A token covers a `kernel x kernel` window of latent cells, windows
//! advance by `stride` and the latent is zero-padded by `pad` on each side.
//! With the defaults (4, 2, 1) neighbouring windows share one cell on each
//! side and a `128 x 128` latent yields a `64 x 64` token grid.
//!
//! Token vectors are the flattened window, channel-major:
//! `[ch][dy][dx]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::raster::{LatentImage, Mask};

/// `(row, col)` on the token grid.
pub type GridPos = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub latent_h: usize,
    pub latent_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeometry {
    pub const KERNEL: usize = 4;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn new(
        latent_h: usize,
        latent_w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::Config("kernel and stride must be positive".into()));
        }
        if latent_h + 2 * pad < kernel || latent_w + 2 * pad < kernel {
            return Err(Error::Config(format!(
                "kernel {kernel} larger than padded latent {latent_h}x{latent_w}"
            )));
        }
        Ok(Self {
            latent_h,
            latent_w,
            kernel,
            stride,
            pad,
            grid_h: (latent_h + 2 * pad - kernel) / stride + 1,
            grid_w: (latent_w + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Default 4/2/1 overlapping geometry.
    pub fn overlapping(latent_h: usize, latent_w: usize) -> Result<Self> {
        Self::new(latent_h, latent_w, Self::KERNEL, Self::STRIDE, Self::PAD)
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn window_cells(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        channels * self.window_cells()
    }

    pub fn position(&self, flat: usize) -> GridPos {
        (flat / self.grid_w, flat % self.grid_w)
    }

    pub fn flat(&self, pos: GridPos) -> usize {
        pos.0 * self.grid_w + pos.1
    }

    pub fn positions(&self) -> Vec<GridPos> {
        (0..self.tokens()).map(|i| self.position(i)).collect()
    }

    /// Latent cell under window offset `(dy, dx)` of token `pos`, if it is
    /// not padding.
    pub fn cell(&self, pos: GridPos, dy: usize, dx: usize) -> Option<(usize, usize)> {
        let y = (pos.0 * self.stride + dy).checked_sub(self.pad)?;
        let x = (pos.1 * self.stride + dx).checked_sub(self.pad)?;
        (y < self.latent_h && x < self.latent_w).then_some((y, x))
    }

    /// Flat gather indices that turn `channels` stacked latent planes into
    /// `[tokens, channels * kernel^2]` windows (`None` = padding).
    pub fn window_index(&self, channels: usize) -> Vec<Option<usize>> {
        let k = self.kernel;
        let plane = self.latent_h * self.latent_w;
        let mut idx = Vec::with_capacity(self.tokens() * channels * k * k);
        for t in 0..self.tokens() {
            let pos = self.position(t);
            for c in 0..channels {
                for dy in 0..k {
                    for dx in 0..k {
                        idx.push(
                            self.cell(pos, dy, dx)
                                .map(|(y, x)| c * plane + y * self.latent_w + x),
                        );
                    }
                }
            }
        }
        idx
    }

    pub fn expect_latent(&self, latent: &LatentImage) -> Result<()> {
        if latent.height != self.latent_h || latent.width != self.latent_w {
            return Err(Error::Shape(format!(
                "latent is {}x{}, geometry expects {}x{}",
                latent.height, latent.width, self.latent_h, self.latent_w
            )));
        }
        Ok(())
    }
}

/// Tokens with their grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet {
    /// `[len, dim]`.
    pub values: Tensor,
    pub positions: Vec<GridPos>,
}

impl TokenSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Row-major token coordinates with `m_i = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HoleIndexSet {
    pub positions: Vec<GridPos>,
    /// Flat (row-major) token indices, same order as `positions`.
    pub flat: Vec<usize>,
}

impl HoleIndexSet {
    pub fn from_token_mask(tokens: &Mask) -> Self {
        let mut positions = Vec::new();
        let mut flat = Vec::new();
        for r in 0..tokens.height {
            for c in 0..tokens.width {
                if tokens.get(r, c) {
                    positions.push((r, c));
                    flat.push(r * tokens.width + c);
                }
            }
        }
        Self { positions, flat }
    }

    pub fn all(geom: &PatchGeometry) -> Self {
        Self {
            positions: geom.positions(),
            flat: (0..geom.tokens()).collect(),
        }
    }

    /// `k`, the number of hole tokens.
    pub fn k(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }
}

/// A canvas mask at pixel, latent and token resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub full: Mask,
    pub latent: Mask,
    pub tokens: Mask,
}

impl MaskSpec {
    pub fn hole_indices(&self) -> HoleIndexSet {
        HoleIndexSet::from_token_mask(&self.tokens)
    }

    pub fn k(&self) -> usize {
        self.tokens.count()
    }
}

/// Reduces a pixel mask to latent resolution (a latent cell is a hole if
/// any of its `factor x factor` pixels is) and then to the token grid (a
/// token is a hole if any cell in its window is).
pub fn reduce_mask(full: &Mask, factor: usize, geom: &PatchGeometry) -> Result<MaskSpec> {
    if factor == 0 {
        return Err(Error::Config("latent factor must be positive".into()));
    }
    full.expect_dims(geom.latent_h * factor, geom.latent_w * factor)?;
    let latent = Mask::from_fn(geom.latent_h, geom.latent_w, |y, x| {
        (0..factor).any(|dy| (0..factor).any(|dx| full.get(y * factor + dy, x * factor + dx)))
    });
    let k = geom.kernel;
    let tokens = Mask::from_fn(geom.grid_h, geom.grid_w, |r, c| {
        (0..k).any(|dy| {
            (0..k).any(|dx| {
                geom.cell((r, c), dy, dx)
                    .is_some_and(|(y, x)| latent.get(y, x))
            })
        })
    });
    Ok(MaskSpec {
        full: full.clone(),
        latent,
        tokens,
    })
}

/// Splits a latent (plus an optional extra plane, e.g. the mask channel)
/// into one flattened window per grid token.
pub fn patchify(
    latent: &LatentImage,
    extra_plane: Option<&[f64]>,
    geom: &PatchGeometry,
) -> Result<TokenSet> {
    geom.expect_latent(latent)?;
    let plane = geom.latent_h * geom.latent_w;
    let mut stacked = latent.data.clone();
    let mut channels = latent.channels;
    if let Some(extra) = extra_plane {
        if extra.len() != plane {
            return Err(Error::Shape(format!(
                "extra plane has {} values, latent plane has {plane}",
                extra.len()
            )));
        }
        stacked.extend_from_slice(extra);
        channels += 1;
    }
    let data = geom
        .window_index(channels)
        .into_iter()
        .map(|i| i.map_or(0.0, |i| stacked[i]))
        .collect();
    Ok(TokenSet {
        values: Tensor::new(&[geom.tokens(), geom.token_dim(channels)], data)?,
        positions: geom.positions(),
    })
}

/// Inverse of [`patchify`] for a subset of tokens. Cells covered by several
/// windows receive the average of their contributions; cells covered by no
/// token stay zero.
pub fn scatter_unpatchify(
    tokens: &Tensor,
    idx: &HoleIndexSet,
    geom: &PatchGeometry,
    channels: usize,
) -> Result<LatentImage> {
    if tokens.rows() != idx.k() && idx.k() > 0 {
        return Err(Error::Shape(format!(
            "{} tokens for {} hole positions",
            tokens.rows(),
            idx.k()
        )));
    }
    if idx.k() > 0 && tokens.cols() != geom.token_dim(channels) {
        return Err(Error::Shape(format!(
            "token width {} != {} channels x {} cells",
            tokens.cols(),
            channels,
            geom.window_cells()
        )));
    }
    let mut out = LatentImage::zeros(channels, geom.latent_h, geom.latent_w);
    let mut count = vec![0u32; geom.latent_h * geom.latent_w];
    let k = geom.kernel;
    for (row, &pos) in idx.positions.iter().enumerate() {
        if pos.0 >= geom.grid_h || pos.1 >= geom.grid_w {
            return Err(Error::Index(format!(
                "token {pos:?} outside {}x{} grid",
                geom.grid_h, geom.grid_w
            )));
        }
        let t = tokens.row(row);
        for dy in 0..k {
            for dx in 0..k {
                let Some((y, x)) = geom.cell(pos, dy, dx) else {
                    continue;
                };
                count[y * geom.latent_w + x] += 1;
                for c in 0..channels {
                    let i = out.idx(c, y, x);
                    out.data[i] += t[(c * k + dy) * k + dx];
                }
            }
        }
    }
    for c in 0..channels {
        for (cell, &n) in count.iter().enumerate() {
            if n > 1 {
                out.data[c * count.len() + cell] /= n as f64;
            }
        }
    }
    Ok(out)
}

/// `(1 - M) ⊙ Z + M ⊙ Z_hole` as a cellwise select, so visible cells are
/// copied bit-for-bit.
pub fn blend_latent(z: &LatentImage, z_hole: &LatentImage, latent_mask: &Mask) -> Result<LatentImage> {
    if !z.same_dims(z_hole) {
        return Err(Error::Shape("latent and hole latent differ in shape".into()));
    }
    latent_mask.expect_dims(z.height, z.width)?;
    let mut out = z.clone();
    for c in 0..z.channels {
        for y in 0..z.height {
            for x in 0..z.width {
                if latent_mask.get(y, x) {
                    let i = z.idx(c, y, x);
                    out.data[i] = z_hole.data[i];
                }
            }
        }
    }
    Ok(out)
}
