//! Complete model: configuration, parameters, encoder and decoder.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::decoder::{Decoder, DecoderConfig, Variant};
use crate::diffusion::{Denoiser, NoiseSchedule, DEFAULT_T};
use crate::encoder::{ContextEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor};
use crate::patch::{GridPos, PatchGeometry};

/// Number of shape classes in the synthetic data.
pub const TOY_CLASSES: usize = 4;
pub const FULL_CLASSES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square canvas side in pixels.
    pub canvas: usize,
    pub codec: LatentCodec,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Training diffusion steps `T`.
    pub timesteps: usize,
}

impl ModelConfig {
    /// 32x32 canvas, 16x16x4 latent, 8x8 token grid.
    pub fn toy(variant: Variant) -> Self {
        Self {
            canvas: 32,
            codec: LatentCodec::toy(),
            kernel: PatchGeometry::KERNEL,
            stride: PatchGeometry::STRIDE,
            pad: PatchGeometry::PAD,
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig::toy(variant, TOY_CLASSES),
            timesteps: DEFAULT_T,
        }
    }

    /// 1024x1024 canvas, 128x128x4 latent, 64x64 token grid.
    pub fn full(variant: Variant) -> Self {
        Self {
            canvas: 1024,
            codec: LatentCodec::full(),
            kernel: PatchGeometry::KERNEL,
            stride: PatchGeometry::STRIDE,
            pad: PatchGeometry::PAD,
            encoder: EncoderConfig::full(),
            decoder: DecoderConfig::full(variant, FULL_CLASSES),
            timesteps: DEFAULT_T,
        }
    }

    pub fn variant(&self) -> Variant {
        self.decoder.variant
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        let mut c = *self;
        c.decoder.variant = variant;
        c
    }

    /// Side of the fixed-resolution crop used by `regenerate_crop`.
    pub fn crop_canvas(&self) -> usize {
        self.canvas / 2
    }

    pub fn latent_channels(&self) -> usize {
        self.codec.channels()
    }

    pub fn geometry_for(&self, canvas: usize) -> Result<PatchGeometry> {
        let (lh, lw) = self.codec.latent_dims(canvas, canvas)?;
        PatchGeometry::new(lh, lw, self.kernel, self.stride, self.pad)
    }

    /// Token grid of the full canvas.
    pub fn geometry(&self) -> Result<PatchGeometry> {
        self.geometry_for(self.canvas)
    }

    /// Token grid the decoder runs on (the crop grid for `regenerate_crop`).
    pub fn decoder_geometry(&self) -> Result<PatchGeometry> {
        match self.variant() {
            Variant::RegenerateCrop => self.geometry_for(self.crop_canvas()),
            _ => self.geometry(),
        }
    }

    /// Width `p = c·K²` of a noise token.
    pub fn token_dim(&self) -> usize {
        self.latent_channels() * self.kernel * self.kernel
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        self.geometry()?;
        self.decoder_geometry()?;
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LazyModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Option<ContextEncoder>,
    pub decoder: Decoder,
    pub schedule: NoiseSchedule,
}

impl LazyModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.latent_channels();
        let encoder = if config.variant().uses_encoder() {
            Some(ContextEncoder::new(
                &mut params,
                "enc",
                config.encoder,
                config.geometry()?,
                c,
                config.codec.factor(),
                &mut rng,
            )?)
        } else {
            None
        };
        let decoder = Decoder::new(
            &mut params,
            "dec",
            config.decoder,
            config.decoder_geometry()?,
            c,
            config.encoder.dim,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            schedule: NoiseSchedule::cosine(config.timesteps)?,
        })
    }

    /// Rebuilds the layer structure for `config` and installs `params`,
    /// which must carry exactly the expected names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for {}, found {}",
                model.params.len(),
                config.variant(),
                params.len()
            )));
        }
        for (id, name, t) in model.params.iter() {
            let Some(src) = params.find(name) else {
                return Err(Error::Checkpoint(format!("missing tensor {name}")));
            };
            if src.index() != id.index() || params.get(src).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    t.shape(),
                    params.get(src).shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn variant(&self) -> Variant {
        self.config.variant()
    }

    pub fn codec(&self) -> LatentCodec {
        self.config.codec
    }

    pub fn null_label(&self) -> usize {
        self.config.decoder.null_label()
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.decoder.classes {
            return Err(Error::Index(format!(
                "label {label} outside vocabulary of {}",
                self.config.decoder.classes
            )));
        }
        Ok(())
    }
}

/// A decoder bound to fixed token positions and context, usable by the
/// sampler. Counts the token rows it processes.
pub struct BoundDecoder<'a> {
    pub model: &'a LazyModel,
    pub positions: Vec<GridPos>,
    pub context: Tensor,
    rows: Cell<usize>,
    noise_rows: Cell<usize>,
}

impl<'a> BoundDecoder<'a> {
    pub fn new(model: &'a LazyModel, positions: Vec<GridPos>, context: Tensor) -> Self {
        Self {
            model,
            positions,
            context,
            rows: Cell::new(0),
            noise_rows: Cell::new(0),
        }
    }

    /// Total token rows pushed through the transformer blocks so far.
    pub fn rows_processed(&self) -> usize {
        self.rows.get()
    }

    /// Total noise tokens denoised so far, summed over evaluations.
    pub fn noise_rows(&self) -> usize {
        self.noise_rows.get()
    }
}

impl Denoiser for BoundDecoder<'_> {
    fn predict(&self, x_t: &Tensor, t: usize, label: usize) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(&self.model.params);
        let x = g.constant(x_t.clone());
        let c = g.constant_ref(&self.context);
        let out = self.model.decoder.forward(&mut g, x, &self.positions, t as f64, label, c)?;
        self.rows.set(self.rows.get() + out.rows);
        self.noise_rows.set(self.noise_rows.get() + x_t.rows());
        let eps = g.value(out.eps).clone();
        let var = g.value(out.var).clone();
        eps.ensure_finite("decoder ε prediction")?;
        Ok((eps, var))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_and_full_geometry() {
        let toy = ModelConfig::toy(Variant::ConcatHidden);
        assert_eq!(toy.geometry().unwrap().tokens(), 64);
        assert_eq!(toy.token_dim(), 64);
        let crop = ModelConfig::toy(Variant::RegenerateCrop);
        assert_eq!(crop.decoder_geometry().unwrap().tokens(), 16);
        let big = ModelConfig::full(Variant::ConcatHidden);
        big.validate().unwrap();
        assert_eq!(big.geometry().unwrap().tokens(), 4096);
        assert_eq!(big.with_variant(Variant::RegenerateCrop).decoder_geometry().unwrap().tokens(), 1024);
    }

    #[test]
    fn every_toy_variant_builds() {
        for v in Variant::ALL {
            let m = LazyModel::new(ModelConfig::toy(v), 1).unwrap();
            assert_eq!(m.encoder.is_some(), v.uses_encoder());
            let again = LazyModel::from_params(m.config, m.params.clone()).unwrap();
            assert_eq!(again.params.len(), m.params.len());
        }
    }

    #[test]
    fn from_params_rejects_foreign_layout() {
        let a = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 1).unwrap();
        let b = ModelConfig::toy(Variant::WeightedSum);
        assert!(matches!(LazyModel::from_params(b, a.params), Err(Error::Checkpoint(_))));
    }
}
