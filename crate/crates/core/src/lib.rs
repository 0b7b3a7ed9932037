//! Incremental diffusion inpainting whose cost scales with the hole.
//!
//! An edit goes through these stages:
//!
//! 1. A context encoder reads the whole masked canvas once and keeps one
//!    compact vector per hole token.
//! 2. The diffusion decoder then denoises only the hole tokens, conditioned
//!    on those vectors.
//! 3. The result is decoded and Poisson-blended into the canvas, so pixels
//!    outside the mask never change.
//!
//! Everything runs on a toy scale (32x32 canvas, 8x8 token grid) with an
//! `f64` autograd in [`nn`]. The analytic cost model in [`cost`] also covers
//! the full-size configuration.
//!
//! ```no_run
//! use lazydiff::{decoder::Variant, diffusion::SamplerOpts, model::{LazyModel, ModelConfig}};
//! use lazydiff::pipeline::{apply_edit, EditRequest};
//! use lazydiff::raster::{Mask, RgbImage};
//!
//! let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 0)?;
//! let canvas = RgbImage::filled(3, 32, 32, 0.5);
//! let mask = Mask::from_fn(32, 32, |y, x| y < 8 && x < 12);
//! let req = EditRequest { mask, label: 1, opts: SamplerOpts::default() };
//! let out = apply_edit(&model, &canvas, &req, &mut |_| {})?;
//! println!("{} of {} tokens denoised", out.telemetry.k, out.telemetry.n);
//! # Ok::<(), lazydiff::Error>(())
//! ```
//!
//! Each capability has a runnable program under `examples/`.

pub mod bench;
pub mod blend;
pub mod checkpoint;
pub mod codec;
pub mod cost;
pub mod data;
pub mod decoder;
pub mod diffusion;
pub mod encoder;
pub mod evaluate;
mod error;
pub mod mask_protocol;
pub mod model;
pub mod nn;
pub mod patch;
pub mod pipeline;
pub mod raster;
pub mod session;
pub mod train;
pub use error::{Error, Result};
