//! Diffusion-transformer decoder over hole tokens.
//!
//! The backbone is DiT-style: noise tokens are linearly embedded, given
//! 2-D sinusoidal positions, passed through adaLN-modulated blocks driven
//! by `t_emb + label_emb`, and projected to an ε prediction plus a
//! variance-interpolation channel per token. [`Variant`] selects how the
//! encoder context enters:
//!
//! | variant            | context            | mechanism                                  |
//! |--------------------|--------------------|--------------------------------------------|
//! | `concat_hidden`    | hole tokens        | `Linear(x ⊕ τ)` per token                  |
//! | `concat_length`    | hole tokens        | `[x; Linear(τ)]` as one sequence           |
//! | `weighted_sum`     | hole tokens        | `x + w ⊙ Linear(τ)`                        |
//! | `xattn_compressed` | hole tokens        | cross-attention in the first block         |
//! | `xattn_full`       | all `N` tokens     | cross-attention in every block             |
//! | `regenerate_*`     | none (masked image) | noise, masked latent and mask channel-wise |

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    modulate, sincos_2d, Graph, Init, LabelEmbedding, Linear, ParamId, ParamStore, Tensor,
    TimestepEmbedder, TransformerBlock, Var, INIT_STD,
};
use crate::patch::{patchify, GridPos, PatchGeometry};
use crate::raster::{LatentImage, Mask};

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ConcatHidden,
    ConcatLength,
    WeightedSum,
    XattnCompressed,
    XattnFull,
    RegenerateImage,
    RegenerateCrop,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::ConcatHidden,
        Variant::ConcatLength,
        Variant::WeightedSum,
        Variant::XattnCompressed,
        Variant::XattnFull,
        Variant::RegenerateImage,
        Variant::RegenerateCrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConcatHidden => "concat_hidden",
            Variant::ConcatLength => "concat_length",
            Variant::WeightedSum => "weighted_sum",
            Variant::XattnCompressed => "xattn_compressed",
            Variant::XattnFull => "xattn_full",
            Variant::RegenerateImage => "regenerate_image",
            Variant::RegenerateCrop => "regenerate_crop",
        }
    }

    /// Denoises only the hole tokens.
    pub fn is_lazy(self) -> bool {
        !self.is_regenerate()
    }

    pub fn is_regenerate(self) -> bool {
        matches!(self, Variant::RegenerateImage | Variant::RegenerateCrop)
    }

    /// Needs an encoder at all.
    pub fn uses_encoder(self) -> bool {
        self.is_lazy()
    }

    /// Context is every encoder token rather than the hole tokens.
    pub fn uses_full_context(self) -> bool {
        self == Variant::XattnFull
    }

    /// `(layers, hidden)` at full scale, chosen so FLOPs roughly match.
    pub fn full_size(self) -> (usize, usize) {
        match self {
            Variant::ConcatLength => (24, 1024),
            Variant::XattnCompressed => (26, 1152),
            _ => (28, 1152),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub variant: Variant,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Label vocabulary; id `classes` is the null label.
    pub classes: usize,
}

impl DecoderConfig {
    pub const FULL_HEADS: usize = 16;
    pub const TOY_HEADS: usize = 4;

    pub fn full(variant: Variant, classes: usize) -> Self {
        let (layers, dim) = variant.full_size();
        Self {
            variant,
            layers,
            dim,
            heads: Self::FULL_HEADS,
            classes,
        }
    }

    /// Full-scale sizes with depth divided by 7 and width by 18, width
    /// rounded to a multiple of 4 heads.
    pub fn toy(variant: Variant, classes: usize) -> Self {
        let (layers, dim) = variant.full_size();
        let h = Self::TOY_HEADS;
        Self {
            variant,
            layers: ((layers as f64 / 7.0).round() as usize).max(1),
            dim: ((dim as f64 / 18.0 / h as f64).round() as usize).max(1) * h,
            heads: h,
            classes,
        }
    }

    pub fn null_label(&self) -> usize {
        self.classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("invalid decoder config {self:?}")));
        }
        if self.classes == 0 {
            return Err(Error::Config("label vocabulary is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum ContextPath {
    None,
    ConcatHidden { proj: Linear },
    ConcatLength { proj: Linear },
    WeightedSum { proj: Linear, weight: ParamId },
    CrossAttention,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// `[n, p]` noise prediction.
    pub eps: Var,
    /// `[n, p]` variance interpolation, roughly in `[-1, 1]`.
    pub var: Var,
    /// Token rows processed by the transformer blocks.
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub geom: PatchGeometry,
    pub latent_channels: usize,
    pub context_dim: usize,
    pub x_embed: Linear,
    pub t_embed: TimestepEmbedder,
    pub y_embed: LabelEmbedding,
    pub context: ContextPath,
    pub blocks: Vec<TransformerBlock>,
    pub final_adaln: Linear,
    pub final_proj: Linear,
    pos_table: Tensor,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        cfg: DecoderConfig,
        geom: PatchGeometry,
        latent_channels: usize,
        context_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let p = geom.token_dim(latent_channels);
        let init = Init::TruncNormal(INIT_STD);
        let in_dim = if cfg.variant.is_regenerate() {
            p + geom.token_dim(latent_channels + 1)
        } else {
            p
        };
        let x_embed = Linear::new(ps, &format!("{name}.x_embed"), in_dim, d, true, init, rng);
        let t_embed = TimestepEmbedder::new(ps, &format!("{name}.t_embed"), d, rng);
        let y_embed = LabelEmbedding::new(ps, &format!("{name}.y_embed"), cfg.classes, d, rng);
        let ctx_name = format!("{name}.context");
        let context = match cfg.variant {
            Variant::ConcatHidden => ContextPath::ConcatHidden {
                proj: Linear::new(ps, &ctx_name, d + context_dim, d, true, init, rng),
            },
            Variant::ConcatLength => ContextPath::ConcatLength {
                proj: Linear::new(ps, &ctx_name, context_dim, d, true, init, rng),
            },
            Variant::WeightedSum => ContextPath::WeightedSum {
                proj: Linear::new(ps, &ctx_name, context_dim, d, true, init, rng),
                weight: ps.add(format!("{ctx_name}.w"), Tensor::zeros(&[1, d])),
            },
            Variant::XattnCompressed | Variant::XattnFull => ContextPath::CrossAttention,
            Variant::RegenerateImage | Variant::RegenerateCrop => ContextPath::None,
        };
        let blocks = (0..cfg.layers)
            .map(|i| {
                let cross = match cfg.variant {
                    Variant::XattnFull => Some(context_dim),
                    Variant::XattnCompressed if i == 0 => Some(context_dim),
                    _ => None,
                };
                TransformerBlock::modulated(ps, &format!("{name}.block{i}"), d, cfg.heads, cross, rng)
            })
            .collect::<Result<_>>()?;
        let final_adaln = Linear::new(ps, &format!("{name}.final_adaln"), d, 2 * d, true, Init::Zeros, rng);
        let final_proj = Linear::new(ps, &format!("{name}.final_proj"), d, 2 * p, true, init, rng);
        let decoder = Self {
            cfg,
            geom,
            latent_channels,
            context_dim,
            x_embed,
            t_embed,
            y_embed,
            context,
            blocks,
            final_adaln,
            final_proj,
            pos_table: sincos_2d(&geom.positions(), d)?,
        };
        if cfg.variant == Variant::ConcatHidden {
            decoder.init_identity(ps)?;
        }
        Ok(decoder)
    }

    /// Width `p` of a noise token.
    pub fn token_dim(&self) -> usize {
        self.geom.token_dim(self.latent_channels)
    }

    /// Sets the concat-hidden projection to pass the noise half through
    /// unchanged and ignore the context half.
    pub fn init_identity(&self, ps: &mut ParamStore) -> Result<()> {
        match &self.context {
            ContextPath::ConcatHidden { proj } => identity_projection(ps, proj, self.cfg.dim),
            _ => Err(Error::Config(format!(
                "identity init applies to concat_hidden, not {}",
                self.cfg.variant
            ))),
        }
    }

    fn positions(&self, g: &mut Graph<'_>, positions: &[GridPos]) -> Result<Var> {
        let mut rows = Vec::with_capacity(positions.len());
        for &(r, c) in positions {
            if r >= self.geom.grid_h || c >= self.geom.grid_w {
                return Err(Error::Index(format!(
                    "token ({r},{c}) outside {}x{} grid",
                    self.geom.grid_h, self.geom.grid_w
                )));
            }
            rows.push(self.geom.flat((r, c)));
        }
        Ok(g.constant(self.pos_table.gather_rows(&rows)))
    }

    fn condition(&self, g: &mut Graph<'_>, t: f64, label: usize) -> Result<Var> {
        let te = self.t_embed.forward(g, t)?;
        let ye = self.y_embed.forward(g, label)?;
        g.add(te, ye)
    }

    fn head(&self, g: &mut Graph<'_>, x: Var, cond: Var, n: usize, rows: usize) -> Result<DecoderOutput> {
        let d = self.cfg.dim;
        let c = g.silu(cond);
        let m = self.final_adaln.forward(g, c)?;
        let shift = g.slice_cols(m, 0, d)?;
        let scale = g.slice_cols(m, d, d)?;
        let h = g.layer_norm(x, LN_EPS);
        let h = modulate(g, h, shift, scale)?;
        let out = self.final_proj.forward(g, h)?;
        debug_assert_eq!(g.value(out).rows(), n);
        let p = self.token_dim();
        let eps = g.slice_cols(out, 0, p)?;
        let var = g.slice_cols(out, p, p)?;
        Ok(DecoderOutput { eps, var, rows })
    }

    fn check_tokens(&self, g: &Graph<'_>, x_t: Var, positions: &[GridPos]) -> Result<usize> {
        let n = g.value(x_t).rows();
        if g.value(x_t).cols() != self.token_dim() || g.value(x_t).shape().len() != 2 {
            return Err(Error::Shape(format!(
                "noise tokens {:?}, expected [n, {}]",
                g.value(x_t).shape(),
                self.token_dim()
            )));
        }
        if n == 0 {
            return Err(Error::EmptyHole);
        }
        if positions.len() != n {
            return Err(Error::Shape(format!(
                "{n} noise tokens but {} positions",
                positions.len()
            )));
        }
        g.value(x_t).ensure_finite("noise tokens")?;
        Ok(n)
    }

    /// One denoiser evaluation.
    ///
    /// `context` is `[n, context_dim]` hole tokens for the lazy variants,
    /// `[N, context_dim]` for `xattn_full`, and the `[n, (c+1)·K²]` masked
    /// latent / mask windows for the regenerate variants.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x_t: Var,
        positions: &[GridPos],
        t: f64,
        label: usize,
        context: Var,
    ) -> Result<DecoderOutput> {
        let n = self.check_tokens(g, x_t, positions)?;
        let ctx_shape = g.value(context).shape().to_vec();
        let ctx_rows = g.value(context).rows();
        let variant = self.cfg.variant;
        let expect_cols = if variant.is_regenerate() {
            self.geom.token_dim(self.latent_channels + 1)
        } else {
            self.context_dim
        };
        if ctx_shape.len() != 2 || ctx_shape[1] != expect_cols {
            return Err(Error::Shape(format!(
                "{variant} context {ctx_shape:?}, expected [_, {expect_cols}]"
            )));
        }
        if !variant.uses_full_context() && ctx_rows != n {
            return Err(Error::Shape(format!(
                "{variant}: {n} noise tokens but {ctx_rows} context tokens"
            )));
        }
        if variant.uses_full_context() && ctx_rows == 0 {
            return Err(Error::Shape("empty cross-attention context".into()));
        }

        let cond = self.condition(g, t, label)?;
        let pos = self.positions(g, positions)?;
        let mut rows = n;
        let mut h = if variant.is_regenerate() {
            let input = g.concat_cols(&[x_t, context])?;
            self.x_embed.forward(g, input)?
        } else {
            self.x_embed.forward(g, x_t)?
        };
        h = g.add(h, pos)?;

        let mut cross: Option<Var> = None;
        match &self.context {
            ContextPath::None => {}
            ContextPath::ConcatHidden { proj } => {
                let cat = g.concat_cols(&[h, context])?;
                h = proj.forward(g, cat)?;
            }
            ContextPath::WeightedSum { proj, weight } => {
                let c = proj.forward(g, context)?;
                let w = g.param(*weight);
                let c = g.mul_row(c, w)?;
                h = g.add(h, c)?;
            }
            ContextPath::ConcatLength { proj } => {
                let c = proj.forward(g, context)?;
                let c = g.add(c, pos)?;
                h = g.concat_rows(&[h, c])?;
                rows = 2 * n;
            }
            ContextPath::CrossAttention => cross = Some(context),
        }

        for (i, block) in self.blocks.iter().enumerate() {
            let ctx = match variant {
                Variant::XattnFull => cross,
                Variant::XattnCompressed if i == 0 => cross,
                _ => None,
            };
            h = block.forward(g, h, Some(cond), ctx)?;
        }
        if rows != n {
            let keep: Vec<usize> = (0..n).collect();
            h = g.gather_rows(h, &keep)?;
        }
        self.head(g, h, cond, n, rows)
    }

    /// The shared backbone alone: embedding, blocks and head with no
    /// context path. Only defined for variants without cross-attention
    /// or channel-concatenated inputs.
    pub fn forward_backbone(
        &self,
        g: &mut Graph<'_>,
        x_t: Var,
        positions: &[GridPos],
        t: f64,
        label: usize,
    ) -> Result<DecoderOutput> {
        if self.cfg.variant.is_regenerate() || matches!(self.context, ContextPath::CrossAttention) {
            return Err(Error::Config(format!(
                "{} has no context-free backbone path",
                self.cfg.variant
            )));
        }
        let n = self.check_tokens(g, x_t, positions)?;
        let cond = self.condition(g, t, label)?;
        let pos = self.positions(g, positions)?;
        let mut h = self.x_embed.forward(g, x_t)?;
        h = g.add(h, pos)?;
        for block in &self.blocks {
            h = block.forward(g, h, Some(cond), None)?;
        }
        self.head(g, h, cond, n, n)
    }
}

/// Writes `[I; 0]` into a `(d + d_ctx) -> d` projection and zeroes its bias.
pub fn identity_projection(ps: &mut ParamStore, proj: &Linear, d: usize) -> Result<()> {
    if proj.out_dim != d || proj.in_dim < d {
        return Err(Error::Shape(format!(
            "identity init needs a ({d} + ctx) -> {d} projection, got {} -> {}",
            proj.in_dim, proj.out_dim
        )));
    }
    let w = ps.get_mut(proj.weight);
    for (i, v) in w.data_mut().iter_mut().enumerate() {
        let (r, c) = (i / d, i % d);
        *v = if r == c { 1.0 } else { 0.0 };
    }
    if let Some(b) = proj.bias {
        ps.get_mut(b).data_mut().fill(0.0);
    }
    Ok(())
}

/// Channel-concatenated conditioning windows for the regenerate baselines:
/// masked latent plus the latent-resolution mask, `[N, (c+1)·K²]`.
pub fn regenerate_condition(z_masked: &LatentImage, latent_mask: &Mask, geom: &PatchGeometry) -> Result<Tensor> {
    latent_mask.expect_dims(z_masked.height, z_masked.width)?;
    let plane = latent_mask.to_values();
    Ok(patchify(z_masked, Some(&plane), geom)?.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const C: usize = 4;
    const CTX: usize = 16;

    fn build(variant: Variant, layers: usize, dim: usize, seed: u64) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let cfg = DecoderConfig {
            variant,
            layers,
            dim,
            heads: 2,
            classes: 3,
        };
        let geom = PatchGeometry::overlapping(8, 8).unwrap();
        let dec = Decoder::new(&mut ps, "dec", cfg, geom, C, CTX, &mut rng).unwrap();
        (ps, dec)
    }

    fn randomize(ps: &mut ParamStore, seed: u64, skip: &[&str]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in ps.ids().collect::<Vec<_>>() {
            if skip.iter().any(|s| ps.name(id).starts_with(s)) {
                continue;
            }
            let shape = ps.get(id).shape().to_vec();
            *ps.get_mut(id) = standard_normal(&shape, &mut rng).scale(0.2);
        }
    }

    fn context_for(dec: &Decoder, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let rows = if dec.cfg.variant.uses_full_context() { dec.geom.tokens() } else { n };
        let cols = if dec.cfg.variant.is_regenerate() { dec.geom.token_dim(C + 1) } else { CTX };
        standard_normal(&[rows, cols], rng)
    }

    #[test]
    fn toy_table() {
        let size = |v| {
            let c = DecoderConfig::toy(v, 10);
            (c.layers, c.dim)
        };
        assert_eq!(size(Variant::ConcatHidden), (4, 64));
        assert_eq!(size(Variant::ConcatLength), (3, 56));
        assert_eq!(size(Variant::XattnCompressed), (4, 64));
        for v in Variant::ALL {
            DecoderConfig::toy(v, 10).validate().unwrap();
            DecoderConfig::full(v, 10).validate().unwrap();
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn every_variant_keeps_token_count() {
        for v in Variant::ALL {
            let (mut ps, dec) = build(v, 2, 8, 1);
            randomize(&mut ps, 2, &[]);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let n = 5;
            let x = standard_normal(&[n, dec.token_dim()], &mut rng);
            let ctx = context_for(&dec, n, &mut rng);
            let positions: Vec<_> = (0..n).map(|i| (i / 4, i % 4)).collect();
            let mut g = Graph::new(&ps);
            let xv = g.constant(x);
            let cv = g.constant(ctx);
            let out = dec.forward(&mut g, xv, &positions, 10.0, 1, cv).unwrap();
            assert_eq!(g.value(out.eps).shape(), &[n, dec.token_dim()], "{v}");
            assert_eq!(g.value(out.var).shape(), &[n, dec.token_dim()], "{v}");
            let expect_rows = if v == Variant::ConcatLength { 2 * n } else { n };
            assert_eq!(out.rows, expect_rows);
        }
    }

    #[test]
    fn context_count_mismatch_is_rejected() {
        let (ps, dec) = build(Variant::ConcatHidden, 1, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new(&ps);
        let x = g.constant(standard_normal(&[3, dec.token_dim()], &mut rng));
        let c = g.constant(standard_normal(&[2, CTX], &mut rng));
        let err = dec.forward(&mut g, x, &[(0, 0), (0, 1), (0, 2)], 1.0, 0, c);
        assert!(matches!(err, Err(Error::Shape(_))));
        let c = g.constant(standard_normal(&[3, CTX + 1], &mut rng));
        assert!(dec.forward(&mut g, x, &[(0, 0), (0, 1), (0, 2)], 1.0, 0, c).is_err());
    }

    #[test]
    fn weighted_sum_with_zero_weight_ignores_context() {
        let (mut ps, dec) = build(Variant::WeightedSum, 2, 8, 4);
        randomize(&mut ps, 5, &["dec.context.w"]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = standard_normal(&[4, dec.token_dim()], &mut rng);
        let ctx = standard_normal(&[4, CTX], &mut rng);
        let pos = [(0, 0), (1, 1), (2, 3), (3, 3)];
        let run = |ctx: Tensor| {
            let mut g = Graph::new(&ps);
            let xv = g.constant(x.clone());
            let cv = g.constant(ctx);
            let out = dec.forward(&mut g, xv, &pos, 30.0, 2, cv).unwrap();
            g.value(out.eps).clone()
        };
        assert_eq!(run(ctx), run(Tensor::zeros(&[4, CTX])));
    }

    #[test]
    fn identity_init_matches_backbone_and_ignores_context() {
        let (mut ps, dec) = build(Variant::ConcatHidden, 2, 8, 7);
        randomize(&mut ps, 8, &[]);
        dec.init_identity(&mut ps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = standard_normal(&[16, dec.token_dim()], &mut rng);
        let pos: Vec<_> = dec.geom.positions();
        let mut g = Graph::new(&ps);
        let xv = g.constant(x.clone());
        let c1 = g.constant(standard_normal(&[16, CTX], &mut rng));
        let c2 = g.constant(standard_normal(&[16, CTX], &mut rng));
        let a = dec.forward(&mut g, xv, &pos, 5.0, 0, c1).unwrap();
        let b = dec.forward(&mut g, xv, &pos, 5.0, 0, c2).unwrap();
        let base = dec.forward_backbone(&mut g, xv, &pos, 5.0, 0).unwrap();
        assert_eq!(g.value(a.eps), g.value(b.eps));
        assert!(g.value(a.eps).max_abs_diff(g.value(base.eps)) <= 1e-12);
        assert!(g.value(a.var).max_abs_diff(g.value(base.var)) <= 1e-12);
    }

    #[test]
    fn identity_init_rejects_other_variants() {
        let (mut ps, dec) = build(Variant::WeightedSum, 1, 8, 1);
        assert!(dec.init_identity(&mut ps).is_err());
        let (mut ps, dec) = build(Variant::ConcatHidden, 1, 8, 1);
        let ContextPath::ConcatHidden { proj } = &dec.context else { unreachable!() };
        assert!(identity_projection(&mut ps, proj, 12).is_err());
    }

    #[test]
    fn out_of_grid_position_is_rejected() {
        let (ps, dec) = build(Variant::ConcatHidden, 1, 8, 1);
        let mut g = Graph::new(&ps);
        let x = g.constant(Tensor::zeros(&[1, dec.token_dim()]));
        let c = g.constant(Tensor::zeros(&[1, CTX]));
        assert!(matches!(dec.forward(&mut g, x, &[(4, 0)], 1.0, 0, c), Err(Error::Index(_))));
        assert!(dec.forward(&mut g, x, &[(0, 0)], 1.0, 4, c).is_err());
    }
}
