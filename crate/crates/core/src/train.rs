//! Joint training of the context encoder and decoder.
//!
//! Each example draws a canvas from the synthetic stream, picks one entity,
//! dilates its mask, encodes the masked canvas, gathers the hole context
//! and regresses the noise added to the hole tokens. Gradients flow through
//! the decoder into the encoder. Regenerate baselines denoise every token
//! but are scored on the hole tokens only.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth_dataset, SynthStream};
use crate::decoder::{regenerate_condition, Variant};
use crate::diffusion::{gaussian, hybrid_loss_with_mean, LossTerms};
use crate::error::{Error, Result};
use crate::mask_protocol::sample_mask;
use crate::model::LazyModel;
use crate::nn::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var};
use crate::patch::{patchify, reduce_mask, HoleIndexSet};
use crate::pipeline::crop_inputs;
use crate::raster::{Mask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    /// Probability of replacing the label with the null label.
    pub cfg_dropout: f64,
    pub seed: u64,
    /// Window of the loss moving average.
    pub average_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ConcatHidden,
            iterations: 2000,
            batch_size: 4,
            lr: 1e-3,
            weight_decay: 3e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
            cfg_dropout: 0.1,
            seed: 0,
            average_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.cfg_dropout) {
            return bad("label dropout must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.average_window == 0 {
            return bad("batch size and averaging window must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid optimizer moments");
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return bad("weight decay and clip norm must be non-negative");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads[i]` belongs to the parameter with index `i`;
    /// parameters without a gradient still decay.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let p = params.get_mut(id).data_mut();
            let decay = 1.0 - self.lr * self.weight_decay;
            match &grads[i] {
                Some(g) => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] = p[j] * decay - self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
                None => p.iter_mut().for_each(|x| *x *= decay),
            }
        }
    }
}

/// One training example after masking.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: RgbImage,
    pub mask: Mask,
    pub label: usize,
}

/// Builds the graph for one example's loss. Returns the scalar loss, its
/// terms and the number of output rows that carry loss.
pub fn example_loss(
    model: &LazyModel,
    g: &mut Graph<'_>,
    ex: &TrainExample,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossTerms, usize)> {
    example_loss_with_mean(model, g, ex, t, rng, None).map(|(l, terms, n, _)| (l, terms, n))
}

fn example_loss_with_mean(
    model: &LazyModel,
    g: &mut Graph<'_>,
    ex: &TrainExample,
    t: usize,
    rng: &mut ChaCha8Rng,
    mean_eps: Option<&Tensor>,
) -> Result<(Var, LossTerms, usize, Var)> {
    let cfg = &model.config;
    let (image, mask) = match model.variant() {
        Variant::RegenerateCrop => {
            let (_, img, m) = crop_inputs(&ex.image, &ex.mask, cfg.crop_canvas())?;
            (img, m)
        }
        _ => (ex.image.clone(), ex.mask.clone()),
    };
    let geom = model.decoder.geom;
    let codec = model.codec();
    let spec = reduce_mask(&mask, codec.factor(), &geom)?;
    let hole = spec.hole_indices();
    if hole.k() == 0 {
        return Err(Error::EmptyHole);
    }
    let z_masked = codec.encode(&image.masked_out(&mask)?)?;
    let z = codec.encode(&image)?;
    let clean = patchify(&z, None, &geom)?.values;

    let variant = model.variant();
    let rows = if variant.is_regenerate() {
        HoleIndexSet::all(&geom)
    } else {
        hole.clone()
    };
    let x0 = clean.gather_rows(&rows.flat);
    let noise = gaussian(x0.shape(), rng);
    let x_t = model.schedule.q_sample(&x0, t, &noise)?;

    let context = if variant.is_regenerate() {
        g.constant(regenerate_condition(&z_masked, &spec.latent, &geom)?)
    } else {
        let encoder = model
            .encoder
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{variant} model has no encoder")))?;
        let all = encoder.forward(g, &z_masked, &spec)?;
        if variant.uses_full_context() {
            all
        } else {
            g.gather_rows(all, &hole.flat)?
        }
    };
    let xv = g.constant(x_t.clone());
    let mut out = model.decoder.forward(g, xv, &rows.positions, t as f64, ex.label, context)?;
    let (x0, x_t, noise) = if variant.is_regenerate() {
        // Score the hole rows only.
        out.eps = g.gather_rows(out.eps, &hole.flat)?;
        out.var = g.gather_rows(out.var, &hole.flat)?;
        (x0.gather_rows(&hole.flat), x_t.gather_rows(&hole.flat), noise.gather_rows(&hole.flat))
    } else {
        (x0, x_t, noise)
    };
    let scored = g.value(out.eps).rows();
    debug_assert_eq!(scored, hole.k());
    let (loss, terms) = hybrid_loss_with_mean(g, &model.schedule, &out, &x0, &x_t, &noise, t, mean_eps)?;
    Ok((loss, terms, scored, out.eps))
}

/// Finite-difference check of one example's training loss against
/// backprop, over every parameter of `model`. Noise is drawn from
/// `noise_seed` on every evaluation.
pub fn loss_grad_check<R: Rng + ?Sized>(
    model: &LazyModel,
    ex: &TrainExample,
    t: usize,
    noise_seed: u64,
    eps: f64,
    max_entries: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let eps_ref = {
        let mut g = Graph::new(&model.params);
        let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
        let (.., eps) = example_loss_with_mean(model, &mut g, ex, t, &mut r, None)?;
        g.value(eps).clone()
    };
    let mut params = model.params.clone();
    grad_check(
        &mut params,
        &[],
        |g, _| {
            let mut r = ChaCha8Rng::seed_from_u64(noise_seed);
            Ok(example_loss_with_mean(model, g, ex, t, &mut r, Some(&eps_ref))?.0)
        },
        eps,
        max_entries,
        rng,
    )
}


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub mse: f64,
    pub vlb: f64,
    pub moving_average: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss,mse,vlb,moving_average,grad_norm\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.8},{:.8},{:.8},{:.8},{:.6}",
                r.iteration, r.loss, r.mse, r.vlb, r.moving_average, r.grad_norm
            );
        }
        s
    }

    pub fn last_average(&self) -> Option<f64> {
        self.rows.last().map(|r| r.moving_average)
    }
}

/// Streams masked examples from the synthetic dataset.
pub struct ExampleStream {
    data: SynthStream,
    rng: ChaCha8Rng,
    dropout: f64,
    null_label: usize,
}

impl ExampleStream {
    pub fn new(model: &LazyModel, seed: u64, dropout: f64) -> Result<Self> {
        let cfg = &model.config;
        Ok(Self {
            data: synth_dataset(usize::MAX, cfg.canvas, cfg.codec.factor(), seed)?,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b),
            dropout,
            null_label: model.null_label(),
        })
    }
}

impl Iterator for ExampleStream {
    type Item = Result<TrainExample>;

    fn next(&mut self) -> Option<Self::Item> {
        let s = self.data.next()?;
        let pick = self.rng.random_range(0..s.entities.len());
        let mask = match sample_mask(&s.entities[pick], &mut self.rng) {
            Ok(m) => m,
            Err(e) => return Some(Err(e)),
        };
        let label = if self.rng.random_bool(self.dropout) {
            self.null_label
        } else {
            s.labels[pick]
        };
        Some(Ok(TrainExample {
            image: s.image,
            mask,
            label,
        }))
    }
}

/// Trains `model` in place. `on_row` sees every trace row as it is produced.
pub fn train(model: &mut LazyModel, cfg: &TrainConfig, on_row: &mut dyn FnMut(&TraceRow)) -> Result<LossTrace> {
    cfg.validate()?;
    if cfg.variant != model.variant() {
        return Err(Error::Config(format!(
            "training config is for {}, model is {}",
            cfg.variant,
            model.variant()
        )));
    }
    let mut opt = AdamW::new(&model.params, cfg);
    let mut examples = ExampleStream::new(model, cfg.seed, cfg.cfg_dropout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut trace = LossTrace::default();
    let mut window = std::collections::VecDeque::with_capacity(cfg.average_window);
    let t_max = model.schedule.len();

    for iteration in 1..=cfg.iterations {
        let mut grads: Vec<Option<Tensor>> = vec![None; model.params.len()];
        let (mut loss, mut mse, mut vlb) = (0.0, 0.0, 0.0);
        let scale = 1.0 / cfg.batch_size as f64;
        for _ in 0..cfg.batch_size {
            let ex = examples.next().expect("stream is unbounded")?;
            let t = rng.random_range(1..=t_max);
            let mut g = Graph::new(&model.params);
            let (l, terms, _) = example_loss(model, &mut g, &ex, t, &mut rng).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged { iteration, detail },
                e => e,
            })?;
            loss += terms.total * scale;
            mse += terms.mse * scale;
            vlb += terms.vlb * scale;
            let back = g.backward(l)?;
            for (id, grad) in back.params() {
                let slot = &mut grads[id.index()];
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a += scale * b;
                        }
                    }
                    None => *slot = Some(grad.scale(scale)),
                }
            }
        }
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() || !loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("loss {loss}, gradient norm {norm}"),
            });
        }
        if cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm {
            let s = cfg.max_grad_norm / norm;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        opt.update(&mut model.params, &grads);

        if window.len() == cfg.average_window {
            window.pop_front();
        }
        window.push_back(loss);
        let row = TraceRow {
            iteration,
            loss,
            mse,
            vlb,
            moving_average: window.iter().sum::<f64>() / window.len() as f64,
            grad_norm: norm,
        };
        on_row(&row);
        trace.rows.push(row);
    }
    Ok(trace)
}
