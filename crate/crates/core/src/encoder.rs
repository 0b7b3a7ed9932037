//! Global context encoder.
//!
//! The masked latent and a learned downsampling of the pixel mask are
//! stacked channel-wise, cut into overlapping windows, embedded, given 2-D
//! sinusoidal positions and passed through plain pre-norm ViT blocks. All
//! `N` grid tokens are produced; [`drop_tokens`] keeps the hole tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sincos_2d, Graph, Init, LayerNorm, Linear, ParamStore, Tensor, TransformerBlock, Var, INIT_STD};
use crate::patch::{HoleIndexSet, MaskSpec, PatchGeometry, TokenSet};
use crate::raster::LatentImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
}

impl EncoderConfig {
    pub fn toy() -> Self {
        Self {
            layers: 4,
            dim: 64,
            heads: 4,
        }
    }

    /// ViT-XL/2 sizing.
    pub fn full() -> Self {
        Self {
            layers: 28,
            dim: 1152,
            heads: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Hole tokens of the context together with their grid coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTokens {
    pub tokens: TokenSet,
    pub idx: HoleIndexSet,
}

impl ContextTokens {
    pub fn k(&self) -> usize {
        self.idx.k()
    }
}

#[derive(Debug, Clone)]
pub struct ContextEncoder {
    pub cfg: EncoderConfig,
    pub geom: PatchGeometry,
    pub latent_channels: usize,
    pub factor: usize,
    /// Mask downsampling: a `factor x factor`, stride-`factor` convolution.
    pub mask_conv: Linear,
    pub embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pos: Tensor,
    mask_gather: Vec<Option<usize>>,
    window_gather: Vec<Option<usize>>,
}

impl ContextEncoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cfg: EncoderConfig,
        geom: PatchGeometry,
        latent_channels: usize,
        factor: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ff = factor * factor;
        let mask_conv = Linear::new(ps, &format!("{name}.mask_conv"), ff, 1, true, Init::Zeros, rng);
        *ps.get_mut(mask_conv.weight) = Tensor::full(&[ff, 1], 1.0 / ff as f64);
        let embed = Linear::new(
            ps,
            &format!("{name}.embed"),
            geom.token_dim(latent_channels + 1),
            cfg.dim,
            true,
            Init::TruncNormal(INIT_STD),
            rng,
        );
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::plain(ps, &format!("{name}.block{i}"), cfg.dim, cfg.heads, rng))
            .collect::<Result<_>>()?;
        let norm = LayerNorm::new(ps, &format!("{name}.norm"), cfg.dim);

        let (lh, lw) = (geom.latent_h, geom.latent_w);
        let pw = lw * factor;
        let mut mask_gather = Vec::with_capacity(lh * lw * ff);
        for y in 0..lh {
            for x in 0..lw {
                for dy in 0..factor {
                    for dx in 0..factor {
                        mask_gather.push(Some((y * factor + dy) * pw + x * factor + dx));
                    }
                }
            }
        }
        Ok(Self {
            cfg,
            geom,
            latent_channels,
            factor,
            mask_conv,
            embed,
            blocks,
            norm,
            pos: sincos_2d(&geom.positions(), cfg.dim)?,
            mask_gather,
            window_gather: geom.window_index(latent_channels + 1),
        })
    }

    /// Builds `𝒯_all` (`[N, d]`) on the graph. `z` must already be the
    /// encoding of the masked image.
    pub fn forward(&self, g: &mut Graph<'_>, z: &LatentImage, mask: &MaskSpec) -> Result<Var> {
        self.geom.expect_latent(z)?;
        if z.channels != self.latent_channels {
            return Err(Error::Shape(format!(
                "encoder expects {} latent channels, got {}",
                self.latent_channels, z.channels
            )));
        }
        let (ph, pw) = (self.geom.latent_h * self.factor, self.geom.latent_w * self.factor);
        mask.full.expect_dims(ph, pw)?;
        z.ensure_finite()?;

        let plane = self.geom.latent_h * self.geom.latent_w;
        let m = g.constant(Tensor::new(&[1, ph * pw], mask.full.to_values())?);
        let blocks = g.gather(m, self.mask_gather.clone(), &[plane, self.factor * self.factor])?;
        let m_lat = self.mask_conv.forward(g, blocks)?;
        let m_lat = g.reshape(m_lat, &[1, plane])?;
        let zt = g.constant(Tensor::new(&[1, z.data.len()], z.data.clone())?);
        let stacked = g.concat_cols(&[zt, m_lat])?;
        let windows = g.gather(
            stacked,
            self.window_gather.clone(),
            &[self.geom.tokens(), self.geom.token_dim(self.latent_channels + 1)],
        )?;
        let mut x = self.embed.forward(g, windows)?;
        let pos = g.constant(self.pos.clone());
        x = g.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(g, x, None, None)?;
        }
        self.norm.forward(g, x)
    }
}

/// Runs the encoder outside any training graph.
pub fn encode_context(
    encoder: &ContextEncoder,
    params: &ParamStore,
    z: &LatentImage,
    mask: &MaskSpec,
) -> Result<TokenSet> {
    let mut g = Graph::new(params);
    let out = encoder.forward(&mut g, z, mask)?;
    let values = g.value(out).clone();
    values.ensure_finite("encoder output")?;
    Ok(TokenSet {
        values,
        positions: encoder.geom.positions(),
    })
}

/// Keeps the tokens whose grid cell is in the hole, in row-major order.
pub fn drop_tokens(all: &TokenSet, mask: &MaskSpec) -> Result<ContextTokens> {
    let grid = mask.tokens.height * mask.tokens.width;
    if all.len() != grid {
        return Err(Error::Shape(format!(
            "{} tokens for a {grid}-cell token mask",
            all.len()
        )));
    }
    let idx = mask.hole_indices();
    Ok(ContextTokens {
        tokens: TokenSet {
            values: all.values.gather_rows(&idx.flat),
            positions: idx.positions.clone(),
        },
        idx,
    })
}
