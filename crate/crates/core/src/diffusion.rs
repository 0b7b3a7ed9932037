//! Cosine-schedule DDPM with learned-range variances, the hybrid
//! `L_simple + λ·L_vlb` objective and a respaced ancestral sampler with
//! classifier-free guidance.
//!
//! Timesteps are 1-based (`1..=T`); table index `t - 1` holds step `t`.

use std::f64::consts::{LN_2, PI};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decoder::DecoderOutput;
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

pub const DEFAULT_T: usize = 1000;
pub const VLB_WEIGHT: f64 = 0.001;
const COSINE_S: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
    pub alphas_cumprod_prev: Vec<f64>,
    pub posterior_variance: Vec<f64>,
    pub posterior_log_variance_clipped: Vec<f64>,
    pub posterior_mean_coef1: Vec<f64>,
    pub posterior_mean_coef2: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with `T` steps.
    pub fn cosine(t_steps: usize) -> Result<Self> {
        if t_steps < 1 {
            return Err(Error::Config("diffusion needs at least one step".into()));
        }
        let f = |t: f64| (((t / t_steps as f64) + COSINE_S) / (1.0 + COSINE_S) * PI / 2.0).cos().powi(2);
        let betas = (0..t_steps)
            .map(|i| (1.0 - f(i as f64 + 1.0) / f(i as f64)).min(MAX_BETA))
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        let mut alphas_cumprod = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        Ok(Self::build(betas, alphas_cumprod))
    }

    /// Schedule whose `ᾱ` table is exactly `alphas_cumprod` (strictly
    /// decreasing, in `(0, 1)`).
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        let ok = !alphas_cumprod.is_empty()
            && alphas_cumprod.iter().all(|&a| a > 0.0 && a < 1.0)
            && alphas_cumprod.windows(2).all(|w| w[1] < w[0]);
        if !ok {
            return Err(Error::Config("ᾱ must be strictly decreasing inside (0, 1)".into()));
        }
        let betas = (0..alphas_cumprod.len())
            .map(|i| match i {
                0 => 1.0 - alphas_cumprod[0],
                _ => 1.0 - alphas_cumprod[i] / alphas_cumprod[i - 1],
            })
            .collect();
        Ok(Self::build(betas, alphas_cumprod))
    }

    fn build(betas: Vec<f64>, alphas_cumprod: Vec<f64>) -> Self {
        let n = betas.len();
        let alphas_cumprod_prev: Vec<f64> = std::iter::once(1.0).chain(alphas_cumprod[..n - 1].iter().copied()).collect();
        // Step 1 has ᾱ_prev = 1: zero posterior variance, mean = x0.
        let posterior_variance: Vec<f64> = (0..n)
            .map(|i| match i {
                0 => 0.0,
                _ => betas[i] * (1.0 - alphas_cumprod_prev[i]) / (1.0 - alphas_cumprod[i]),
            })
            .collect();
        // The first posterior variance is zero; borrow the second for the log.
        let first = if n > 1 { posterior_variance[1] } else { betas[0] };
        let posterior_log_variance_clipped = (0..n)
            .map(|i| if i == 0 { first.ln() } else { posterior_variance[i].ln() })
            .collect();
        let posterior_mean_coef1 = (0..n)
            .map(|i| match i {
                0 => 1.0,
                _ => betas[i] * alphas_cumprod_prev[i].sqrt() / (1.0 - alphas_cumprod[i]),
            })
            .collect();
        let posterior_mean_coef2 = (0..n)
            .map(|i| match i {
                0 => 0.0,
                _ => (1.0 - alphas_cumprod_prev[i]) * (1.0 - betas[i]).sqrt() / (1.0 - alphas_cumprod[i]),
            })
            .collect();
        Self {
            betas,
            alphas_cumprod,
            alphas_cumprod_prev,
            posterior_variance,
            posterior_log_variance_clipped,
            posterior_mean_coef1,
            posterior_mean_coef2,
        }
    }

    /// Number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `ᾱ_t` for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_cumprod[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Index(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }

    /// `√ᾱ_t·x0 + √(1-ᾱ_t)·noise`.
    pub fn q_sample(&self, x0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        x0.zip_map(noise, |x, e| sa * x + sn * e)
    }

    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let a = self.alpha_bar(t);
        let (r, rm1) = ((1.0 / a).sqrt(), (1.0 / a - 1.0).sqrt());
        x_t.zip_map(eps, |x, e| r * x - rm1 * e)
    }

    /// Mean of `q(x_{t-1} | x_t, x0)`.
    pub fn posterior_mean(&self, x0: &Tensor, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        let (c1, c2) = (self.posterior_mean_coef1[t - 1], self.posterior_mean_coef2[t - 1]);
        x0.zip_map(x_t, |a, b| c1 * a + c2 * b)
    }

    /// Log-variance interpolated between `β̃_t` (`v = -1`) and `β_t` (`v = 1`).
    pub fn model_log_variance(&self, v: f64, t: usize) -> f64 {
        let (lo, hi) = (self.posterior_log_variance_clipped[t - 1], self.betas[t - 1].ln());
        let frac = (v + 1.0) / 2.0;
        frac * hi + (1.0 - frac) * lo
    }
}

/// A subsequence of the training timesteps with the matching betas, so
/// that `ᾱ` agrees with the full schedule at every kept step.
#[derive(Debug, Clone)]
pub struct Respaced {
    /// Original 1-based timesteps, increasing.
    pub timesteps: Vec<usize>,
    pub schedule: NoiseSchedule,
}

impl Respaced {
    /// Evenly strided `steps` out of `1..=t_max`, both ends included.
    pub fn new(base: &NoiseSchedule, t_max: usize, steps: usize) -> Result<Self> {
        if t_max == 0 || t_max > base.len() {
            return Err(Error::Config(format!("t_max {t_max} outside [1, {}]", base.len())));
        }
        if steps == 0 || steps > t_max {
            return Err(Error::Config(format!("cannot take {steps} steps out of {t_max}")));
        }
        let timesteps: Vec<usize> = if steps == 1 {
            vec![t_max]
        } else {
            let stride = (t_max - 1) as f64 / (steps - 1) as f64;
            (0..steps).map(|i| (i as f64 * stride).round() as usize + 1).collect()
        };
        let schedule = NoiseSchedule::from_alphas_cumprod(timesteps.iter().map(|&t| base.alpha_bar(t)).collect())?;
        Ok(Self { timesteps, schedule })
    }
}

/// Terms of the hybrid objective, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub mse: f64,
    /// Per-element KL (or decoder NLL at `t = 1`) in bits.
    pub vlb: f64,
    pub total: f64,
}

/// `mean((ε - ε̂)²) + λ·T·L_t` on the graph, where `L_t` is the per-element
/// variational term in bits for the sampled step. The mean prediction is
/// treated as a constant inside `L_t`, so that term trains only the
/// variance channel.
pub fn hybrid_loss(
    g: &mut Graph<'_>,
    schedule: &NoiseSchedule,
    out: &DecoderOutput,
    x0: &Tensor,
    x_t: &Tensor,
    noise: &Tensor,
    t: usize,
) -> Result<(Var, LossTerms)> {
    hybrid_loss_with_mean(g, schedule, out, x0, x_t, noise, t, None)
}

/// [`hybrid_loss`] with the mean inside `L_t` computed from `mean_eps`
/// instead of the current prediction. At `mean_eps = ε̂` both have the same
/// value and gradient, but this one is a fixed function of the parameters,
/// which is what finite differences need.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss_with_mean(
    g: &mut Graph<'_>,
    schedule: &NoiseSchedule,
    out: &DecoderOutput,
    x0: &Tensor,
    x_t: &Tensor,
    noise: &Tensor,
    t: usize,
    mean_eps: Option<&Tensor>,
) -> Result<(Var, LossTerms)> {
    schedule.check_t(t)?;
    let eps_hat = match mean_eps {
        Some(e) => e.clone(),
        None => g.value(out.eps).clone(),
    };
    eps_hat.expect_same_shape(noise)?;
    x0.expect_same_shape(noise)?;
    x_t.expect_same_shape(noise)?;

    let target = g.constant(noise.clone());
    let diff = g.sub(out.eps, target)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq);

    let i = t - 1;
    let (lo, hi) = (schedule.posterior_log_variance_clipped[i], schedule.betas[i].ln());
    // log σ² = lo + (hi - lo)·(v + 1)/2
    let half = 0.5 * (hi - lo);
    let logvar = g.scale(out.var, half);
    let logvar = g.offset(logvar, lo + half);
    let neg = g.scale(logvar, -1.0);
    let inv_var = g.exp(neg);

    let x0_pred = schedule.predict_x0(x_t, t, &eps_hat)?;
    let mean_pred = schedule.posterior_mean(&x0_pred, x_t, t)?;
    let vlb = if t == 1 {
        // -log N(x0; μ, σ²)
        let sq_err = x0.zip_map(&mean_pred, |a, b| (a - b) * (a - b))?;
        let c = g.constant(sq_err);
        let quad = g.mul(c, inv_var)?;
        let s = g.add(quad, logvar)?;
        let s = g.offset(s, (2.0 * PI).ln());
        g.scale(s, 0.5 / LN_2)
    } else {
        let true_mean = schedule.posterior_mean(x0, x_t, t)?;
        let var_q = schedule.posterior_variance[i];
        let logvar_q = schedule.posterior_log_variance_clipped[i];
        let num = true_mean.zip_map(&mean_pred, |a, b| var_q + (a - b) * (a - b))?;
        let c = g.constant(num);
        let ratio = g.mul(c, inv_var)?;
        let s = g.add(ratio, logvar)?;
        let s = g.offset(s, -1.0 - logvar_q);
        g.scale(s, 0.5 / LN_2)
    };
    let vlb = g.mean(vlb);
    let weighted = g.scale(vlb, VLB_WEIGHT * schedule.len() as f64);
    let total = g.add(mse, weighted)?;
    let terms = LossTerms {
        mse: g.scalar(mse),
        vlb: g.scalar(vlb),
        total: g.scalar(total),
    };
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!("hybrid loss at t={t}: {terms:?}")));
    }
    Ok((total, terms))
}

/// Anything that predicts `(ε̂, v)` for noisy tokens.
pub trait Denoiser {
    fn predict(&self, x_t: &Tensor, t: usize, label: usize) -> Result<(Tensor, Tensor)>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize, usize) -> Result<(Tensor, Tensor)>,
{
    fn predict(&self, x_t: &Tensor, t: usize, label: usize) -> Result<(Tensor, Tensor)> {
        self(x_t, t, label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerOpts {
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    /// 0 starts from pure noise.
    pub sdedit_strength: f64,
}

impl Default for SamplerOpts {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 4.5,
            seed: 0,
            sdedit_strength: 0.0,
        }
    }
}

impl SamplerOpts {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.guidance_scale >= 1.0) {
            return Err(Error::Config(format!(
                "guidance scale must be >= 1, got {}",
                self.guidance_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.sdedit_strength) {
            return Err(Error::Config(format!(
                "sdedit strength must lie in [0, 1], got {}",
                self.sdedit_strength
            )));
        }
        Ok(())
    }
}

/// Progress notification, once per denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTick {
    /// 1-based index of the step just finished.
    pub step: usize,
    pub total: usize,
    /// Model timestep evaluated at this step.
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub tokens: Tensor,
    /// Denoiser evaluations (2 per step with guidance, 1 without).
    pub evaluations: usize,
    pub steps: usize,
    pub start_t: usize,
}

/// Starting point for SDEdit: `t* = round(strength·T)` (at least 1) and the
/// noised tokens `q_sample(x0, t*, ε)`.
pub fn sdedit_init(
    x0: &Tensor,
    strength: f64,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, usize)> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Config(format!(
            "sdedit strength must lie in (0, 1], got {strength}"
        )));
    }
    let t_star = ((strength * schedule.len() as f64).round() as usize).clamp(1, schedule.len());
    let noise = gaussian(x0.shape(), rng);
    Ok((schedule.q_sample(x0, t_star, &noise)?, t_star))
}

pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Ancestral sampling of `[n, p]` tokens.
///
/// Random draws, in order: the starting noise (or the SDEdit noise), then
/// one draw per step except the last. With `guidance_scale == 1` only the
/// conditional branch is evaluated.
#[allow(clippy::too_many_arguments)]
pub fn sample<D: Denoiser + ?Sized>(
    model: &D,
    shape: [usize; 2],
    label: usize,
    null_label: usize,
    opts: &SamplerOpts,
    schedule: &NoiseSchedule,
    sdedit_source: Option<&Tensor>,
    on_step: &mut dyn FnMut(StepTick),
) -> Result<SampleOutput> {
    opts.validate()?;
    if shape[0] == 0 {
        return Err(Error::EmptyHole);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut x, t_max, steps) = if opts.sdedit_strength > 0.0 {
        let src = sdedit_source
            .ok_or_else(|| Error::Config("sdedit needs the current hole tokens".into()))?;
        if src.shape() != shape {
            return Err(Error::Shape(format!(
                "sdedit source {:?} does not match {shape:?}",
                src.shape()
            )));
        }
        let (x, t_star) = sdedit_init(src, opts.sdedit_strength, schedule, &mut rng)?;
        let steps = ((opts.steps as f64 * opts.sdedit_strength).round() as usize).clamp(1, t_star);
        (x, t_star, steps)
    } else {
        (gaussian(&shape, &mut rng), schedule.len(), opts.steps)
    };
    if steps > t_max {
        return Err(Error::Config(format!("{steps} steps exceed {t_max} timesteps")));
    }
    let chain = Respaced::new(schedule, t_max, steps)?;
    let sched = &chain.schedule;
    let guided = opts.guidance_scale != 1.0;
    let mut evaluations = 0;

    for (done, i) in (0..steps).rev().enumerate() {
        let t_model = chain.timesteps[i];
        let (eps_c, v) = model.predict(&x, t_model, label)?;
        evaluations += 1;
        let eps = if guided {
            let (eps_u, _) = model.predict(&x, t_model, null_label)?;
            evaluations += 1;
            let s = opts.guidance_scale;
            eps_u.zip_map(&eps_c, |u, c| u + s * (c - u))?
        } else {
            eps_c
        };
        eps.expect_same_shape(&x)?;
        v.expect_same_shape(&x)?;
        let t = i + 1;
        let x0 = sched.predict_x0(&x, t, &eps)?;
        let mean = sched.posterior_mean(&x0, &x, t)?;
        x = if i > 0 {
            let z = gaussian(&shape, &mut rng);
            let mut next = mean;
            for ((m, &vv), &zz) in next.data_mut().iter_mut().zip(v.data()).zip(z.data()) {
                *m += (0.5 * sched.model_log_variance(vv, t)).exp() * zz;
            }
            next
        } else {
            mean
        };
        x.ensure_finite("sampler state")?;
        on_step(StepTick {
            step: done + 1,
            total: steps,
            t: t_model,
        });
    }
    Ok(SampleOutput {
        tokens: x,
        evaluations,
        steps,
        start_t: t_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn cosine_endpoints() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert!(s.alpha_bar(1) > 0.999);
        assert!(s.alpha_bar(1000) < 0.01);
        assert!(s.alphas_cumprod.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        let one = NoiseSchedule::cosine(1).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.alpha_bar(1) - (1.0 - MAX_BETA)).abs() < 1e-15);
        assert!(NoiseSchedule::cosine(0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = gaussian(&[3, 5], &mut rng);
        let e = gaussian(&[3, 5], &mut rng);
        let zero = Tensor::zeros(&[3, 5]);
        let t = 37;
        let a = s.alpha_bar(t);
        assert_eq!(s.q_sample(&x0, t, &zero).unwrap(), x0.map(|v| a.sqrt() * v));
        let got = s.q_sample(&x0, t, &e).unwrap();
        for i in 0..15 {
            let want = a.sqrt() * x0.data()[i] + (1.0 - a).sqrt() * e.data()[i];
            assert_eq!(got.data()[i], want);
        }
        // a schedule whose first step keeps nearly everything
        let tiny = NoiseSchedule::from_betas(vec![1e-300, 0.5]).unwrap();
        assert_eq!(tiny.q_sample(&x0, 1, &e).unwrap(), x0);
        assert!(s.q_sample(&x0, 0, &e).is_err());
    }

    #[test]
    fn respacing_keeps_both_ends() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let r = Respaced::new(&s, 1000, 50).unwrap();
        assert_eq!(r.timesteps.len(), 50);
        assert_eq!((r.timesteps[0], r.timesteps[49]), (1, 1000));
        for (i, &t) in r.timesteps.iter().enumerate() {
            assert!((r.schedule.alpha_bar(i + 1) - s.alpha_bar(t)).abs() < 1e-12);
        }
        let full = Respaced::new(&s, 1000, 1000).unwrap();
        assert_eq!(full.timesteps, (1..=1000).collect::<Vec<_>>());
        assert_eq!(Respaced::new(&s, 1000, 1).unwrap().timesteps, vec![1000]);
        assert!(Respaced::new(&s, 10, 11).is_err());
    }

    #[test]
    fn one_token_hybrid_loss_by_hand() {
        use crate::nn::ParamStore;
        let s = NoiseSchedule::cosine(10).unwrap();
        let t = 4;
        let (x0v, ev, eps_hat_v, vv) = (0.7, -0.3, 0.1, 0.25);
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let eps = g.input(Tensor::full(&[1, 1], eps_hat_v));
        let var = g.input(Tensor::full(&[1, 1], vv));
        let out = DecoderOutput { eps, var, rows: 1 };
        let x0 = Tensor::full(&[1, 1], x0v);
        let noise = Tensor::full(&[1, 1], ev);
        let x_t = s.q_sample(&x0, t, &noise).unwrap();
        let (_, terms) = hybrid_loss(&mut g, &s, &out, &x0, &x_t, &noise, t).unwrap();

        let ab = s.alpha_bar(t);
        let ab_prev = s.alpha_bar(t - 1);
        let beta = 1.0 - ab / ab_prev;
        let xt = ab.sqrt() * x0v + (1.0 - ab).sqrt() * ev;
        let x0_hat = (xt - (1.0 - ab).sqrt() * eps_hat_v) / ab.sqrt();
        let c1 = beta * ab_prev.sqrt() / (1.0 - ab);
        let c2 = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab);
        let mu_q = c1 * x0v + c2 * xt;
        let mu_p = c1 * x0_hat + c2 * xt;
        let var_q = beta * (1.0 - ab_prev) / (1.0 - ab);
        let frac = (vv + 1.0) / 2.0;
        let logvar_p = frac * beta.ln() + (1.0 - frac) * var_q.ln();
        let kl = 0.5 * (-1.0 + logvar_p - var_q.ln() + (var_q + (mu_q - mu_p).powi(2)) / logvar_p.exp());
        let mse = (eps_hat_v - ev).powi(2);
        let want = mse + 0.001 * 10.0 * kl / LN_2;
        assert!((terms.mse - mse).abs() < 1e-12);
        assert!((terms.total - want).abs() < 1e-10, "{} vs {want}", terms.total);
    }

    #[test]
    fn perfect_prediction_zeroes_mse() {
        use crate::nn::ParamStore;
        let s = NoiseSchedule::cosine(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = gaussian(&[4, 6], &mut rng);
        let noise = gaussian(&[4, 6], &mut rng);
        for t in [1, 2, 25, 50] {
            let x_t = s.q_sample(&x0, t, &noise).unwrap();
            let ps = ParamStore::new();
            let mut g = Graph::new(&ps);
            let eps = g.input(noise.clone());
            let var = g.input(Tensor::zeros(&[4, 6]));
            let out = DecoderOutput { eps, var, rows: 4 };
            let (_, terms) = hybrid_loss(&mut g, &s, &out, &x0, &x_t, &noise, t).unwrap();
            assert_eq!(terms.mse, 0.0);
            assert!(terms.vlb.is_finite());
        }
    }

    #[test]
    fn vlb_gradient_reaches_only_the_variance_channel() {
        use crate::nn::ParamStore;
        let s = NoiseSchedule::cosine(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian(&[2, 3], &mut rng);
        let noise = gaussian(&[2, 3], &mut rng);
        let x_t = s.q_sample(&x0, 20, &noise).unwrap();
        let ps = ParamStore::new();
        let mut g = Graph::new(&ps);
        let eps = g.input(noise.clone());
        let var = g.input(gaussian(&[2, 3], &mut rng).scale(0.3));
        let out = DecoderOutput { eps, var, rows: 2 };
        let (loss, _) = hybrid_loss(&mut g, &s, &out, &x0, &x_t, &noise, 20).unwrap();
        let grads = g.backward(loss).unwrap();
        // ε̂ = ε exactly: the mse gradient vanishes and the vlb term does
        // not touch the mean.
        assert!(grads.wrt(eps).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(var).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn monte_carlo_moments() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Tensor::full(&[1, 1], 0.8);
        for t in [10, 500, 990] {
            let n = 10_000;
            let draws: Vec<f64> = (0..n)
                .map(|_| s.q_sample(&x0, t, &gaussian(&[1, 1], &mut rng)).unwrap().data()[0])
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let a = s.alpha_bar(t);
            let se_mean = ((1.0 - a) / n as f64).sqrt();
            assert!((mean - a.sqrt() * 0.8).abs() < 3.0 * se_mean);
            let se_var = (1.0 - a) * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - (1.0 - a)).abs() < 3.0 * se_var);
        }
    }

    fn zero_model(x: &Tensor, _t: usize, _l: usize) -> Result<(Tensor, Tensor)> {
        Ok((Tensor::zeros(x.shape()), Tensor::zeros(x.shape())))
    }

    #[test]
    fn zero_model_matches_scalar_loop() {
        let s = NoiseSchedule::cosine(40).unwrap();
        let opts = SamplerOpts {
            steps: 40,
            guidance_scale: 1.0,
            seed: 11,
            sdedit_strength: 0.0,
        };
        let out = sample(&zero_model, [2, 3], 0, 1, &opts, &s, None, &mut |_| {}).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
        for t in (1..=40).rev() {
            let ab = s.alpha_bar(t);
            let ab_prev = if t > 1 { s.alpha_bar(t - 1) } else { 1.0 };
            let beta = 1.0 - ab / ab_prev;
            let var_post = beta * (1.0 - ab_prev) / (1.0 - ab);
            let log_lo = if t == 1 { s.posterior_variance[1].ln() } else { var_post.ln() };
            let logvar = 0.5 * beta.ln() + 0.5 * log_lo;
            let noise: Vec<f64> = if t > 1 { (0..6).map(|_| StandardNormal.sample(&mut rng)).collect() } else { vec![0.0; 6] };
            for (xi, zi) in x.iter_mut().zip(noise) {
                let x0 = *xi / ab.sqrt();
                let mean = beta * ab_prev.sqrt() / (1.0 - ab) * x0 + (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab) * *xi;
                *xi = mean + (0.5 * logvar).exp() * zi;
            }
        }
        for (a, b) in out.tokens.data().iter().zip(&x) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
        assert_eq!(out.evaluations, 40);
    }

    #[test]
    fn single_step_is_one_posterior_update() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let model = |x: &Tensor, _t: usize, _l: usize| -> Result<(Tensor, Tensor)> {
            Ok((x.scale(0.5), Tensor::zeros(x.shape())))
        };
        let opts = SamplerOpts {
            steps: 1,
            guidance_scale: 1.0,
            seed: 5,
            sdedit_strength: 0.0,
        };
        let out = sample(&model, [1, 4], 0, 1, &opts, &s, None, &mut |_| {}).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_t = gaussian(&[1, 4], &mut rng);
        let want = s.predict_x0(&x_t, 1000, &x_t.scale(0.5)).unwrap();
        assert!(out.tokens.max_abs_diff(&want) < 1e-9);
        assert_eq!(out.evaluations, 1);
    }

    fn label_model(x: &Tensor, t: usize, l: usize) -> Result<(Tensor, Tensor)> {
        let k = 0.1 * l as f64 + 0.001 * t as f64;
        Ok((x.map(|v| (v * k).tanh()), x.map(|v| (v * k).sin() * 0.5)))
    }

    #[test]
    fn guidance_one_is_conditional_sampling() {
        let s = NoiseSchedule::cosine(200).unwrap();
        let opts = SamplerOpts {
            steps: 20,
            guidance_scale: 1.0,
            seed: 9,
            sdedit_strength: 0.0,
        };
        let guided = sample(&label_model, [3, 4], 2, 5, &opts, &s, None, &mut |_| {}).unwrap();
        let cond_only = |x: &Tensor, t: usize, _l: usize| label_model(x, t, 2);
        let plain = sample(&cond_only, [3, 4], 2, 2, &opts, &s, None, &mut |_| {}).unwrap();
        assert_eq!(guided.tokens, plain.tokens);
        let strong = SamplerOpts { guidance_scale: 4.5, ..opts };
        let g2 = sample(&label_model, [3, 4], 2, 5, &strong, &s, None, &mut |_| {}).unwrap();
        assert_ne!(g2.tokens, plain.tokens);
        assert_eq!(g2.evaluations, 40);
    }

    #[test]
    fn fixed_seed_is_deterministic_and_ticks() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let opts = SamplerOpts {
            steps: 10,
            guidance_scale: 3.0,
            seed: 1,
            sdedit_strength: 0.0,
        };
        let mut ticks = Vec::new();
        let a = sample(&label_model, [2, 2], 1, 3, &opts, &s, None, &mut |t| ticks.push(t)).unwrap();
        let b = sample(&label_model, [2, 2], 1, 3, &opts, &s, None, &mut |_| {}).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(ticks.len(), 10);
        assert_eq!(ticks[0], StepTick { step: 1, total: 10, t: 100 });
        assert_eq!(ticks[9].t, 1);
        assert!(matches!(
            sample(&label_model, [0, 2], 1, 3, &opts, &s, None, &mut |_| {}),
            Err(Error::EmptyHole)
        ));
    }

    #[test]
    fn sdedit_start_points() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = gaussian(&[2, 3], &mut rng);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let (x, t) = sdedit_init(&x0, 0.5, &s, &mut r).unwrap();
        assert_eq!(t, 500);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let e = gaussian(&[2, 3], &mut r);
        assert_eq!(x, s.q_sample(&x0, 500, &e).unwrap());

        let (x, t) = sdedit_init(&x0, 1.0, &s, &mut r).unwrap();
        assert_eq!(t, 1000);
        assert!(s.alpha_bar(t) < 1e-3);
        assert!(x.max_abs_diff(&x0) > 0.1);
        let (x, t) = sdedit_init(&x0, 1e-4, &s, &mut r).unwrap();
        assert_eq!(t, 1);
        assert!(x.max_abs_diff(&x0) < 0.05);
        assert!(sdedit_init(&x0, 0.0, &s, &mut r).is_err());
    }

    #[test]
    fn sdedit_sampling_runs_shortened_chain() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        let opts = SamplerOpts {
            steps: 50,
            guidance_scale: 1.0,
            seed: 3,
            sdedit_strength: 0.3,
        };
        let mut ticks = 0;
        let out = sample(&zero_model, [2, 3], 0, 1, &opts, &s, Some(&src), &mut |_| ticks += 1).unwrap();
        assert_eq!((out.steps, out.start_t, ticks), (15, 300, 15));
        assert!(sample(&zero_model, [2, 3], 0, 1, &opts, &s, None, &mut |_| {}).is_err());
    }
}
