//! End-to-end edits: the lazy pipeline and the two regenerate baselines.
//!
//! A lazy edit encodes the masked canvas, keeps the hole context tokens,
//! denoises only the hole tokens, scatters them back into the latent,
//! composites against the existing latent, decodes and Poisson-blends the
//! result into the canvas. Pixels outside the mask are never written.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blend::{poisson_blend, BlendProblem};
use crate::cost::{edit_cost_at, EditCost};
use crate::decoder::{regenerate_condition, Variant};
use crate::diffusion::{sample, SamplerOpts, StepTick};
use crate::encoder::{drop_tokens, encode_context};
use crate::error::{Error, Result};
use crate::model::{BoundDecoder, LazyModel};
use crate::patch::{blend_latent, patchify, reduce_mask, scatter_unpatchify, HoleIndexSet, PatchGeometry};
use crate::raster::{LatentImage, Mask, RgbImage};

/// Absolute residual tolerance of the Poisson solve.
pub const BLEND_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    pub mask: Mask,
    pub label: usize,
    pub opts: SamplerOpts,
}

/// Wall-clock time per phase, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub encoder_ms: f64,
    pub sampling_ms: f64,
    pub per_step_ms: f64,
    pub codec_ms: f64,
    pub blend_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub variant: Variant,
    pub mask_ratio: f64,
    /// Hole tokens `k` on the full grid.
    pub k: usize,
    /// Grid tokens `N`.
    pub n: usize,
    /// Noise tokens the decoder denoised per evaluation.
    pub decoder_tokens: usize,
    pub steps: usize,
    pub evaluations: usize,
    /// Noise tokens denoised summed over steps (one branch): `k · steps`
    /// for a lazy edit.
    pub token_steps: usize,
    pub timings: PhaseTimings,
    pub flops: EditCost,
    /// What `regenerate_image` would have cost for the same edit.
    pub regenerate_flops: EditCost,
    pub analytic_speedup: f64,
    pub blend_iterations: usize,
    pub blend_residual: f64,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    /// Updated canvas.
    pub canvas: RgbImage,
    /// Generated content decoded on black.
    pub patch: RgbImage,
    /// Composited latent on the decoder's grid (the crop grid for
    /// `regenerate_crop`).
    pub latent: LatentImage,
    pub telemetry: Telemetry,
}

/// Square window handed to `regenerate_crop`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub y0: usize,
    pub x0: usize,
    pub side: usize,
}

/// Smallest square of side at least `crop_res` covering the mask's
/// bounding box, centered on it and shifted to stay inside the canvas.
pub fn crop_box(mask: &Mask, crop_res: usize) -> Result<CropBox> {
    let (y0, x0, y1, x1) = mask.bbox().ok_or(Error::EmptyHole)?;
    let limit = mask.height.min(mask.width);
    let side = (y1 - y0 + 1).max(x1 - x0 + 1).max(crop_res).min(limit);
    if y1 - y0 + 1 > side || x1 - x0 + 1 > side {
        return Err(Error::Mask(format!(
            "mask bounding box does not fit a {side}-pixel square crop"
        )));
    }
    let place = |lo: usize, hi: usize, n: usize| {
        let start = (lo + hi + 1).saturating_sub(side) / 2;
        start.min(n - side)
    };
    Ok(CropBox {
        y0: place(y0, y1, mask.height),
        x0: place(x0, x1, mask.width),
        side,
    })
}

/// Cuts the crop and resamples it to `crop_res`.
pub fn crop_inputs(image: &RgbImage, mask: &Mask, crop_res: usize) -> Result<(CropBox, RgbImage, Mask)> {
    let b = crop_box(mask, crop_res)?;
    let img = image.crop(b.y0, b.x0, b.side, b.side)?.resize_bilinear(crop_res, crop_res);
    let m = mask.crop(b.y0, b.x0, b.side, b.side)?.resize_any(crop_res, crop_res);
    Ok((b, img, m))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn clamp_region(image: &mut RgbImage, region: &Mask) {
    for c in 0..image.channels {
        for y in 0..image.height {
            for x in 0..image.width {
                if region.get(y, x) {
                    let i = image.idx(c, y, x);
                    image.data[i] = image.data[i].clamp(0.0, 1.0);
                }
            }
        }
    }
}

struct Generated {
    latent: LatentImage,
    decoded: RgbImage,
    patch: RgbImage,
    k: usize,
    decoder_tokens: usize,
    steps: usize,
    evaluations: usize,
    token_steps: usize,
    encoder_ms: f64,
    sampling_ms: f64,
    codec_ms: f64,
}

/// Runs the diffusion part of an edit on `canvas` at the decoder's native
/// resolution and returns the decoded canvas before blending.
fn generate(
    model: &LazyModel,
    canvas: &RgbImage,
    mask: &Mask,
    label: usize,
    opts: &SamplerOpts,
    geom: &PatchGeometry,
    on_step: &mut dyn FnMut(StepTick),
) -> Result<Generated> {
    let codec = model.codec();
    let c = codec.channels();
    let spec = reduce_mask(mask, codec.factor(), geom)?;
    if spec.k() == 0 {
        return Err(Error::EmptyHole);
    }

    let t = Instant::now();
    let z_masked = codec.encode(&canvas.masked_out(mask)?)?;
    let z = codec.encode(canvas)?;
    let mut codec_ms = ms(t);
    let clean = patchify(&z, None, geom)?.values;

    let t = Instant::now();
    let variant = model.variant();
    let (idx, context) = if variant.is_regenerate() {
        (HoleIndexSet::all(geom), regenerate_condition(&z_masked, &spec.latent, geom)?)
    } else {
        let encoder = model
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{variant} model has no encoder")))?;
        let all = encode_context(encoder, &model.params, &z_masked, &spec)?;
        let hole = drop_tokens(&all, &spec)?;
        let ctx = if variant.uses_full_context() {
            all.values
        } else {
            hole.tokens.values
        };
        (hole.idx, ctx)
    };
    let encoder_ms = if variant.uses_encoder() { ms(t) } else { 0.0 };

    let t = Instant::now();
    let n = idx.k();
    let source = clean.gather_rows(&idx.flat);
    let bound = BoundDecoder::new(model, idx.positions.clone(), context);
    let out = sample(
        &bound,
        [n, model.config.token_dim()],
        label,
        model.null_label(),
        opts,
        &model.schedule,
        (opts.sdedit_strength > 0.0).then_some(&source),
        on_step,
    )?;
    let per_step = out.evaluations / out.steps;
    let token_steps = bound.noise_rows() / per_step;
    let generated = scatter_unpatchify(&out.tokens, &idx, geom, c)?;
    let sampling_ms = ms(t);

    let empty = LatentImage::zeros(c, geom.latent_h, geom.latent_w);
    let hole_latent = blend_latent(&empty, &generated, &spec.latent)?;
    let latent = blend_latent(&z, &generated, &spec.latent)?;
    let t = Instant::now();
    let decoded = codec.decode(&latent)?;
    let patch = codec.zero_pad_decode(&hole_latent)?;
    codec_ms += ms(t);
    Ok(Generated {
        latent,
        decoded,
        patch,
        k: spec.k(),
        decoder_tokens: n,
        steps: out.steps,
        evaluations: out.evaluations,
        token_steps,
        encoder_ms,
        sampling_ms,
        codec_ms,
    })
}

/// Applies one edit with whichever variant `model` is.
pub fn apply_edit(
    model: &LazyModel,
    canvas: &RgbImage,
    req: &EditRequest,
    on_step: &mut dyn FnMut(StepTick),
) -> Result<EditOutcome> {
    let start = Instant::now();
    let cfg = &model.config;
    if canvas.channels != 3 || canvas.height != cfg.canvas || canvas.width != cfg.canvas {
        return Err(Error::Shape(format!(
            "canvas {}x{}x{} does not match the model's {}x{} RGB canvas",
            canvas.channels, canvas.height, canvas.width, cfg.canvas, cfg.canvas
        )));
    }
    req.mask.expect_dims(cfg.canvas, cfg.canvas)?;
    if req.mask.is_empty() {
        return Err(Error::EmptyHole);
    }
    model.check_label(req.label)?;
    req.opts.validate()?;
    canvas.ensure_finite()?;

    let full_geom = cfg.geometry()?;
    let (gen, insert) = match model.variant() {
        Variant::RegenerateCrop => {
            let res = cfg.crop_canvas();
            let (b, img, m) = crop_inputs(canvas, &req.mask, res)?;
            let gen = generate(model, &img, &m, req.label, &req.opts, &cfg.decoder_geometry()?, on_step)?;
            let back = gen.decoded.resize_bilinear(b.side, b.side);
            let mut insert = canvas.clone();
            for ch in 0..3 {
                for y in 0..b.side {
                    for x in 0..b.side {
                        insert.set(ch, b.y0 + y, b.x0 + x, back.get(ch, y, x));
                    }
                }
            }
            (gen, insert)
        }
        _ => {
            let gen = generate(model, canvas, &req.mask, req.label, &req.opts, &full_geom, on_step)?;
            let insert = gen.decoded.clone();
            (gen, insert)
        }
    };

    let t = Instant::now();
    let max_iters = (8 * req.mask.count()).max(1000);
    let blended = poisson_blend(
        &BlendProblem {
            base: canvas.clone(),
            insert,
            region: req.mask.clone(),
        },
        BLEND_TOL,
        max_iters,
    )?;
    let blend_ms = ms(t);
    let mut out = blended.image.clone();
    clamp_region(&mut out, &req.mask);

    let ratio = req.mask.ratio();
    let flops = edit_cost_at(cfg, ratio, gen.decoder_tokens, gen.evaluations)?;
    let ri = cfg.with_variant(Variant::RegenerateImage);
    let regenerate_flops = edit_cost_at(&ri, ratio, full_geom.tokens(), gen.evaluations)?;
    let timings = PhaseTimings {
        encoder_ms: gen.encoder_ms,
        sampling_ms: gen.sampling_ms,
        per_step_ms: gen.sampling_ms / gen.steps as f64,
        codec_ms: gen.codec_ms,
        blend_ms,
        total_ms: ms(start),
    };
    let full_k = match model.variant() {
        Variant::RegenerateCrop => reduce_mask(&req.mask, cfg.codec.factor(), &full_geom)?.k(),
        _ => gen.k,
    };
    Ok(EditOutcome {
        canvas: out,
        patch: gen.patch,
        latent: gen.latent,
        telemetry: Telemetry {
            variant: model.variant(),
            mask_ratio: ratio,
            k: full_k,
            n: full_geom.tokens(),
            decoder_tokens: gen.decoder_tokens,
            steps: gen.steps,
            evaluations: gen.evaluations,
            token_steps: gen.token_steps,
            timings,
            analytic_speedup: regenerate_flops.total / flops.total,
            flops,
            regenerate_flops,
            blend_iterations: blended.iterations,
            blend_residual: blended.final_residual(),
        },
    })
}
