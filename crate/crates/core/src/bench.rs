//! Wall-clock benchmark of the edit phases.
//!
//! For each mask ratio the hole is a full-width band at the top of the
//! canvas. The decoder is timed on exactly `ceil(ratio·N)` tokens so its
//! cost tracks the analytic model; the encoder, codec and blend phases run
//! on the band mask.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blend::{poisson_blend, BlendProblem};
use crate::cost::{decoder_count, tokens_for_ratio};
use crate::decoder::regenerate_condition;
use crate::diffusion::Denoiser;
use crate::encoder::encode_context;
use crate::error::{Error, Result};
use crate::model::{BoundDecoder, LazyModel};
use crate::nn::Tensor;
use crate::patch::{reduce_mask, PatchGeometry};
use crate::pipeline::BLEND_TOL;
use crate::raster::{Mask, RgbImage};

/// Below this a measurement is dominated by timer granularity.
pub const MIN_RELIABLE_MS: f64 = 0.005;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
}

impl Stat {
    pub fn from_samples(ms: &[f64]) -> Self {
        if ms.is_empty() {
            return Self::default();
        }
        let n = ms.len() as f64;
        let mean = ms.iter().sum::<f64>() / n;
        let var = ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            median_ms: median,
            min_ms: sorted[0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub ratio: f64,
    pub tokens: usize,
    pub analytic_step_flops: f64,
    pub encoder: Stat,
    pub decode_step: Stat,
    pub codec: Stat,
    pub blend: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub variant: crate::decoder::Variant,
    pub repetitions: usize,
    pub rows: Vec<TimingRow>,
    pub warnings: Vec<String>,
}

impl TimingTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "ratio,tokens,analytic_step_flops,encoder_mean_ms,encoder_std_ms,decode_step_mean_ms,decode_step_std_ms,decode_step_median_ms,codec_mean_ms,codec_std_ms,blend_mean_ms,blend_std_ms\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6e},{:.5},{:.5},{:.5},{:.5},{:.5},{:.5},{:.5},{:.5},{:.5}",
                r.ratio,
                r.tokens,
                r.analytic_step_flops,
                r.encoder.mean_ms,
                r.encoder.std_ms,
                r.decode_step.mean_ms,
                r.decode_step.std_ms,
                r.decode_step.median_ms,
                r.codec.mean_ms,
                r.codec.std_ms,
                r.blend.mean_ms,
                r.blend.std_ms
            );
        }
        s
    }

    pub fn row(&self, ratio: f64) -> Option<&TimingRow> {
        self.rows.iter().find(|r| r.ratio == ratio)
    }

    /// Median per-step decode time at `hi` over that at `lo`.
    pub fn step_ratio(&self, lo: f64, hi: f64) -> Option<f64> {
        Some(self.row(hi)?.decode_step.median_ms / self.row(lo)?.decode_step.median_ms)
    }

    /// Standard deviation of the encoder medians across ratios relative to
    /// their mean.
    pub fn encoder_spread(&self) -> f64 {
        let m: Vec<f64> = self.rows.iter().map(|r| r.encoder.median_ms).collect();
        let s = Stat::from_samples(&m);
        if s.mean_ms == 0.0 { 0.0 } else { s.std_ms / s.mean_ms }
    }

    /// Plot-ready series: mask ratio against per-step and per-phase cost.
    pub fn json_series(&self) -> serde_json::Value {
        let pick = |f: fn(&TimingRow) -> f64| -> Vec<f64> { self.rows.iter().map(f).collect() };
        serde_json::json!({
            "variant": self.variant,
            "mask_ratio": pick(|r| r.ratio),
            "tokens": self.rows.iter().map(|r| r.tokens).collect::<Vec<_>>(),
            "decode_step_ms": pick(|r| r.decode_step.median_ms),
            "encoder_ms": pick(|r| r.encoder.median_ms),
            "codec_ms": pick(|r| r.codec.median_ms),
            "blend_ms": pick(|r| r.blend.median_ms),
            "analytic_step_flops": pick(|r| r.analytic_step_flops),
        })
    }
}

/// A full-width band of `round(ratio·H)` rows (at least one).
pub fn band_mask(size: usize, ratio: f64) -> Mask {
    let rows = ((ratio * size as f64).round() as usize).clamp(1, size);
    Mask::from_fn(size, size, |y, _| y < rows)
}

fn time<T>(f: impl FnOnce() -> Result<T>) -> Result<(f64, T)> {
    let t = Instant::now();
    let v = f()?;
    Ok((t.elapsed().as_secs_f64() * 1e3, v))
}

struct Setup<'a> {
    ratio: f64,
    tokens: usize,
    mask: Mask,
    spec: crate::patch::MaskSpec,
    z_masked: crate::raster::LatentImage,
    bound: BoundDecoder<'a>,
    x: Tensor,
    problem: BlendProblem,
    samples: [Vec<f64>; 4],
}

/// Times each phase `repetitions` times per ratio after `warmup` untimed
/// passes. Ratios are visited round-robin within each repetition so slow
/// drift in machine load hits all of them alike.
pub fn benchmark_wallclock(
    model: &LazyModel,
    canvas: &RgbImage,
    ratios: &[f64],
    repetitions: usize,
    warmup: usize,
) -> Result<TimingTable> {
    if repetitions == 0 {
        return Err(Error::Invalid("benchmark needs at least one repetition".into()));
    }
    let cfg = &model.config;
    let geom: PatchGeometry = model.decoder.geom;
    let codec = model.codec();
    let c = codec.channels();
    let full_geom = cfg.geometry()?;

    let mut setups = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let tokens = tokens_for_ratio(cfg, ratio)?;
        let mask = band_mask(cfg.canvas, ratio);
        let spec = reduce_mask(&mask, codec.factor(), &full_geom)?;
        let z_masked = codec.encode(&canvas.masked_out(&mask)?)?;
        let positions: Vec<_> = (0..tokens).map(|i| geom.position(i)).collect();
        let context = if model.variant().is_regenerate() {
            let lm = Mask::empty(geom.latent_h, geom.latent_w);
            let z = crate::raster::LatentImage::zeros(c, geom.latent_h, geom.latent_w);
            regenerate_condition(&z, &lm, &geom)?.gather_rows(&(0..tokens).collect::<Vec<_>>())
        } else if model.variant().uses_full_context() {
            Tensor::zeros(&[geom.tokens(), cfg.encoder.dim])
        } else {
            Tensor::zeros(&[tokens, cfg.encoder.dim])
        };
        let bound = BoundDecoder::new(model, positions, context);
        let x = Tensor::from_fn(&[tokens, cfg.token_dim()], |i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0);
        let problem = BlendProblem {
            base: canvas.clone(),
            insert: codec.decode(&z_masked)?,
            region: mask.clone(),
        };
        setups.push(Setup {
            ratio,
            tokens,
            mask,
            spec,
            z_masked,
            bound,
            x,
            problem,
            samples: Default::default(),
        });
    }

    for rep in 0..warmup + repetitions {
        let keep = rep >= warmup;
        for s in &mut setups {
            let mut ms = [0.0; 4];
            if let Some(encoder) = &model.encoder {
                ms[0] = time(|| encode_context(encoder, &model.params, &s.z_masked, &s.spec))?.0;
            }
            ms[1] = time(|| s.bound.predict(&s.x, 500, 0))?.0;
            ms[2] = time(|| {
                let z = codec.encode(&canvas.masked_out(&s.mask)?)?;
                codec.decode(&z)
            })?
            .0;
            ms[3] = time(|| poisson_blend(&s.problem, BLEND_TOL, (8 * s.mask.count()).max(1000)))?.0;
            if keep {
                for (v, m) in s.samples.iter_mut().zip(ms) {
                    v.push(m);
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(setups.len());
    let mut warnings = Vec::new();
    for s in &setups {
        let encoder = if model.encoder.is_some() { Stat::from_samples(&s.samples[0]) } else { Stat::default() };
        let row = TimingRow {
            ratio: s.ratio,
            tokens: s.tokens,
            analytic_step_flops: decoder_count(cfg, s.tokens as f64)?.flops(),
            encoder,
            decode_step: Stat::from_samples(&s.samples[1]),
            codec: Stat::from_samples(&s.samples[2]),
            blend: Stat::from_samples(&s.samples[3]),
        };
        for (name, st) in [("encoder", row.encoder), ("decode step", row.decode_step), ("codec", row.codec), ("blend", row.blend)] {
            if st.mean_ms > 0.0 && st.median_ms < MIN_RELIABLE_MS {
                let w = format!("timer resolution insufficient for {name} at ratio {}: {:.6} ms", s.ratio, st.median_ms);
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        rows.push(row);
    }
    Ok(TimingTable {
        variant: model.variant(),
        repetitions,
        rows,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Variant;
    use crate::model::ModelConfig;

    #[test]
    fn stat_summary() {
        let s = Stat::from_samples(&[1.0, 3.0, 2.0, 6.0]);
        assert_eq!((s.mean_ms, s.median_ms, s.min_ms), (3.0, 2.5, 1.0));
        assert!((s.std_ms - 3.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn band_ratio() {
        assert_eq!(band_mask(32, 0.25).count(), 8 * 32);
        assert_eq!(band_mask(32, 0.001).count(), 32);
    }

    #[test]
    fn table_shape() {
        let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 0).unwrap();
        let img = RgbImage::filled(3, 32, 32, 0.5);
        let t = benchmark_wallclock(&model, &img, &[0.1, 1.0], 2, 1).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].tokens, 7);
        assert_eq!(t.rows[1].tokens, 64);
        assert!(t.rows[0].analytic_step_flops < t.rows[1].analytic_step_flops);
        assert_eq!(t.to_csv().lines().count(), 3);
        assert!(t.step_ratio(0.1, 1.0).unwrap() > 1.0);
        assert_eq!(t.json_series()["tokens"], serde_json::json!([7, 64]));
    }
}
