// The cosine schedule, forward noising statistics and a short respaced
// sampling chain driven by a stand-in denoiser.

use lazydiff::diffusion::{gaussian, sample, NoiseSchedule, Respaced, SamplerOpts, DEFAULT_T};
use lazydiff::nn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Empirical mean and variance of `q_sample(x0, t, ε)` over `draws`
/// scalar draws.
pub fn q_sample_moments(s: &NoiseSchedule, x0: f64, t: usize, draws: usize, seed: u64) -> anyhow::Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::full(&[draws, 1], x0);
    let noise = gaussian(&[draws, 1], &mut rng);
    let xt = s.q_sample(&x, t, &noise)?;
    let n = draws as f64;
    let mean = xt.sum() / n;
    let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var))
}

pub fn run_example() -> anyhow::Result<()> {
    let s = NoiseSchedule::cosine(DEFAULT_T)?;
    println!("alpha_bar: t=1 {:.5}, t=500 {:.5}, t=T {:.2e}", s.alpha_bar(1), s.alpha_bar(500), s.alpha_bar(DEFAULT_T));
    for t in [10, 500, 990] {
        let (m, v) = q_sample_moments(&s, 0.7, t, 10_000, t as u64)?;
        let ab = s.alpha_bar(t);
        println!("t={t}: mean {m:.4} (want {:.4}), var {v:.4} (want {:.4})", ab.sqrt() * 0.7, 1.0 - ab);
    }

    let r = Respaced::new(&s, DEFAULT_T, 8)?;
    println!("8-step respacing visits {:?}", r.timesteps);

    // Exact for data concentrated at zero: x_t is all noise, scaled.
    let denoiser = |x: &Tensor, t: usize, _y: usize| {
        let k = 1.0 / (1.0 - s.alpha_bar(t)).sqrt();
        Ok((x.scale(k), Tensor::zeros(x.shape())))
    };
    let opts = SamplerOpts { steps: 8, seed: 3, guidance_scale: 1.0, ..SamplerOpts::default() };
    let a = sample(&denoiser, [5, 4], 0, 4, &opts, &s, None, &mut |_| {})?;
    let b = sample(&denoiser, [5, 4], 0, 4, &opts, &s, None, &mut |_| {})?;
    anyhow::ensure!(a.tokens == b.tokens, "fixed seed must reproduce");
    let norm = a.tokens.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("{} steps, {} evaluations, final token norm {norm:.2e}", a.steps, a.evaluations);
    anyhow::ensure!(norm < 0.5, "an exact denoiser should land near the data");
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
