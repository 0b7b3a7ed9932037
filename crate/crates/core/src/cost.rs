//! Analytic compute model.
//!
//! Matrix products are counted in multiply-accumulates and converted at two
//! FLOPs per MAC. Softmax and layer-norm elements cost five FLOPs each.
//! Other element-wise work (residual adds, activations) is ignored; it is
//! linear in the token count and small next to the projections.
//!
//! The MAC formulas mirror the layer code exactly, so for any toy
//! configuration [`decoder_count`] equals the MACs the autograd tape records
//! for one forward pass.

use std::fmt::Write as _;
use std::ops::{Add, Mul};

use serde::{Deserialize, Serialize};

use crate::decoder::Variant;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::TimestepEmbedder;

pub const FLOPS_PER_MAC: f64 = 2.0;
/// Cost of one softmax or normalization element.
pub const FLOPS_PER_NORMALIZED: f64 = 5.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OpCount {
    pub macs: f64,
    /// Softmax and layer-norm elements.
    pub normalized: f64,
}

impl OpCount {
    pub fn flops(&self) -> f64 {
        FLOPS_PER_MAC * self.macs + FLOPS_PER_NORMALIZED * self.normalized
    }

    fn mm(rows: f64, inner: f64, cols: f64) -> Self {
        Self {
            macs: rows * inner * cols,
            normalized: 0.0,
        }
    }

    fn norm(elements: f64) -> Self {
        Self {
            macs: 0.0,
            normalized: elements,
        }
    }
}

impl Add for OpCount {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            macs: self.macs + o.macs,
            normalized: self.normalized + o.normalized,
        }
    }
}

impl Mul<f64> for OpCount {
    type Output = Self;
    fn mul(self, s: f64) -> Self {
        Self {
            macs: self.macs * s,
            normalized: self.normalized * s,
        }
    }
}

/// Multi-head attention: `s` queries of width `d` over `m` keys of width `kv`.
pub fn attention_count(s: f64, m: f64, d: f64, kv: f64, heads: f64) -> OpCount {
    OpCount::mm(s, d, d) // q
        + OpCount::mm(m, kv, d) * 2.0 // k, v
        + OpCount::mm(s, m, d) * 2.0 // logits and mixing, summed over heads
        + OpCount::mm(s, d, d) // out
        + OpCount::norm(heads * s * m)
}

/// One transformer block on `s` rows. `modulated` adds the adaLN regressor
/// and `cross` a cross-attention over `(m, kv)` context.
pub fn block_count(s: f64, d: f64, heads: f64, modulated: bool, cross: Option<(f64, f64)>) -> OpCount {
    let mut c = attention_count(s, s, d, d, heads)
        + OpCount::mm(s, d, 4.0 * d) * 2.0
        + OpCount::norm(2.0 * s * d);
    if modulated {
        c = c + OpCount::mm(1.0, d, 6.0 * d);
    }
    if let Some((m, kv)) = cross {
        c = c + attention_count(s, m, d, kv, heads);
    }
    c
}

/// One denoiser evaluation on `n` noise tokens.
pub fn decoder_count(cfg: &ModelConfig, n: f64) -> Result<OpCount> {
    let dc = cfg.decoder;
    let (d, h, l) = (dc.dim as f64, dc.heads as f64, dc.layers as f64);
    let ctx = cfg.encoder.dim as f64;
    let p = cfg.token_dim() as f64;
    let big_n = cfg.geometry()?.tokens() as f64;
    let cond_window = (cfg.token_dim() / cfg.latent_channels() * (cfg.latent_channels() + 1)) as f64;

    let stem = OpCount::mm(1.0, TimestepEmbedder::FREQ_DIM as f64, d) + OpCount::mm(1.0, d, d);
    let head = OpCount::mm(1.0, d, 2.0 * d) + OpCount::mm(n, d, 2.0 * p) + OpCount::norm(n * d);
    let blocks = |s: f64| block_count(s, d, h, true, None) * l;

    let body = match dc.variant {
        Variant::ConcatHidden => OpCount::mm(n, p, d) + OpCount::mm(n, d + ctx, d) + blocks(n),
        Variant::WeightedSum => OpCount::mm(n, p, d) + OpCount::mm(n, ctx, d) + blocks(n),
        Variant::ConcatLength => OpCount::mm(n, p, d) + OpCount::mm(n, ctx, d) + blocks(2.0 * n),
        Variant::XattnCompressed => {
            OpCount::mm(n, p, d) + blocks(n) + attention_count(n, n, d, ctx, h)
        }
        Variant::XattnFull => {
            OpCount::mm(n, p, d) + blocks(n) + attention_count(n, big_n, d, ctx, h) * l
        }
        Variant::RegenerateImage | Variant::RegenerateCrop => OpCount::mm(n, p + cond_window, d) + blocks(n),
    };
    Ok(stem + body + head)
}

/// One context-encoder pass over the full token grid.
pub fn encoder_count(cfg: &ModelConfig) -> Result<OpCount> {
    let geom = cfg.geometry()?;
    let e = cfg.encoder;
    let (d, h) = (e.dim as f64, e.heads as f64);
    let big_n = geom.tokens() as f64;
    let f = cfg.codec.factor() as f64;
    let plane = (geom.latent_h * geom.latent_w) as f64;
    let window = geom.token_dim(cfg.latent_channels() + 1) as f64;
    Ok(OpCount::mm(plane, f * f, 1.0)
        + OpCount::mm(big_n, window, d)
        + block_count(big_n, d, h, false, None) * e.layers as f64
        + OpCount::norm(big_n * d))
}

/// Rough Poisson-blend cost for a region of `pixels` pixels, assuming the
/// iteration count grows with the region's side.
pub fn blend_flops(pixels: f64) -> f64 {
    if pixels <= 0.0 {
        return 0.0;
    }
    let iterations = (4.0 * pixels.sqrt()).ceil().min(pixels.max(1.0));
    3.0 * 20.0 * pixels * iterations
}

/// Token count the decoder processes for a hole covering `ratio` of the
/// canvas: `ceil(ratio·N)` for the lazy variants, every token of the
/// decoder grid otherwise.
pub fn tokens_for_ratio(cfg: &ModelConfig, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside (0, 1]")));
    }
    let big_n = cfg.geometry()?.tokens();
    Ok(match cfg.variant() {
        v if v.is_lazy() => ((ratio * big_n as f64).ceil() as usize).clamp(1, big_n),
        _ => cfg.decoder_geometry()?.tokens(),
    })
}

/// Costs of one complete edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EditCost {
    pub variant: Variant,
    pub ratio: f64,
    pub tokens: usize,
    pub evaluations: usize,
    pub decoder_per_eval: f64,
    pub decoder: f64,
    pub encoder: f64,
    pub codec: f64,
    pub blend: f64,
    pub total: f64,
}

/// FLOPs of one edit of `ratio` with `steps` denoising steps. Guidance
/// above 1 doubles the evaluations.
pub fn edit_cost(cfg: &ModelConfig, ratio: f64, steps: usize, guidance: f64) -> Result<EditCost> {
    let tokens = tokens_for_ratio(cfg, ratio)?;
    let evaluations = steps * if guidance == 1.0 { 1 } else { 2 };
    edit_cost_at(cfg, ratio, tokens, evaluations)
}

/// FLOPs of an edit with a known decoder token count and number of
/// denoiser evaluations.
pub fn edit_cost_at(cfg: &ModelConfig, ratio: f64, tokens: usize, evaluations: usize) -> Result<EditCost> {
    let per = decoder_count(cfg, tokens as f64)?.flops();
    let encoder = if cfg.variant().uses_encoder() {
        encoder_count(cfg)?.flops()
    } else {
        0.0
    };
    let codec = cfg.codec.flops(cfg.canvas, cfg.canvas) as f64;
    let blend = blend_flops(ratio * (cfg.canvas * cfg.canvas) as f64);
    let decoder = per * evaluations as f64;
    Ok(EditCost {
        variant: cfg.variant(),
        ratio,
        tokens,
        evaluations,
        decoder_per_eval: per,
        decoder,
        encoder,
        codec,
        blend,
        total: decoder + encoder + codec + blend,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupPoint {
    pub ratio: f64,
    pub tokens: usize,
    pub lazy: EditCost,
    pub baseline: EditCost,
    /// Baseline over lazy, one denoiser evaluation.
    pub per_step: f64,
    /// Baseline over lazy, whole edit including fixed costs.
    pub end_to_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupCurve {
    pub lazy: Variant,
    pub baseline: Variant,
    pub steps: usize,
    pub guidance: f64,
    pub points: Vec<SpeedupPoint>,
}

impl SpeedupCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "ratio,tokens,lazy_per_step,baseline_per_step,lazy_total,baseline_total,per_step_speedup,end_to_end_speedup\n",
        );
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.4},{:.4}",
                p.ratio,
                p.tokens,
                p.lazy.decoder_per_eval,
                p.baseline.decoder_per_eval,
                p.lazy.total,
                p.baseline.total,
                p.per_step,
                p.end_to_end
            );
        }
        s
    }
}

/// Lazy-versus-baseline FLOP ratios over `ratios`. `cfg` and `baseline`
/// must describe the same canvas.
pub fn speedup_curve(
    cfg: &ModelConfig,
    baseline: Variant,
    ratios: &[f64],
    steps: usize,
    guidance: f64,
) -> Result<SpeedupCurve> {
    if !cfg.variant().is_lazy() {
        return Err(Error::Invalid(format!("{} is not a lazy variant", cfg.variant())));
    }
    let base_cfg = cfg.with_variant(baseline);
    let points = ratios
        .iter()
        .map(|&r| {
            let lazy = edit_cost(cfg, r, steps, guidance)?;
            let base = edit_cost(&base_cfg, r, steps, guidance)?;
            Ok(SpeedupPoint {
                ratio: r,
                tokens: lazy.tokens,
                lazy,
                baseline: base,
                per_step: base.decoder_per_eval / lazy.decoder_per_eval,
                end_to_end: base.total / lazy.total,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SpeedupCurve {
        lazy: cfg.variant(),
        baseline,
        steps,
        guidance,
        points,
    })
}

/// Mask ratio at which a lazy decoder processes as many tokens as a
/// decoder run on a `crop_canvas`-sized crop.
pub fn crossover_ratio(cfg: &ModelConfig, crop_canvas: usize) -> Result<f64> {
    let full = cfg.geometry()?.tokens() as f64;
    let crop = cfg.geometry_for(crop_canvas)?.tokens() as f64;
    Ok(crop / full)
}

/// Mask ratio at which one lazy evaluation costs as many FLOPs as one
/// evaluation of the crop baseline on a `crop_canvas` crop. Found by
/// bisection on a continuous token count.
pub fn flop_crossover_ratio(cfg: &ModelConfig, crop_canvas: usize) -> Result<f64> {
    let crop_tokens = cfg.geometry_for(crop_canvas)?.tokens() as f64;
    let target = decoder_count(&cfg.with_variant(Variant::RegenerateCrop), crop_tokens)?.flops();
    let full = cfg.geometry()?.tokens() as f64;
    let cost = |r: f64| decoder_count(cfg, r * full).map(|c| c.flops());
    let (mut lo, mut hi) = (0.0, 1.0);
    if cost(hi)? < target {
        return Ok(1.0);
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if cost(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Relative per-evaluation overhead of `variant` over `regenerate_image`
/// when the hole is the whole canvas.
pub fn full_mask_overhead(cfg: &ModelConfig, variant: Variant) -> Result<f64> {
    let n = cfg.geometry()?.tokens() as f64;
    let v = decoder_count(&cfg.with_variant(variant), n)?.flops();
    let base = decoder_count(&cfg.with_variant(Variant::RegenerateImage), n)?.flops();
    Ok(v / base - 1.0)
}
