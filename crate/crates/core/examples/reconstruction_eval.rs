// Held-out check of a briefly trained model: regenerate a known hole from
// a lightly noised copy and compare with filling it by the mean color.
// `LAZYDIFF_ITERS` sets the training length (default 300).

use lazydiff::decoder::Variant;
use lazydiff::diffusion::SamplerOpts;
use lazydiff::evaluate::{reconstruction_eval, ReconstructionReport};
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::train::{train, TrainConfig};

pub fn run_example() -> anyhow::Result<ReconstructionReport> {
    let iterations = std::env::var("LAZYDIFF_ITERS").ok().and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = TrainConfig { variant: Variant::ConcatHidden, iterations, seed: 1, ..TrainConfig::default() };
    let mut model = LazyModel::new(ModelConfig::toy(cfg.variant), 0)?;
    train(&mut model, &cfg, &mut |_| {})?;
    let opts = SamplerOpts { steps: 25, sdedit_strength: 0.3, ..SamplerOpts::default() };
    let report = reconstruction_eval(&model, 20, 777, opts)?;
    let n = report.cases.len() as f64;
    println!(
        "after {iterations} iterations: beats mean fill on {:.0}% of {} holes (mse {:.4} vs {:.4})",
        100.0 * report.win_rate(),
        report.cases.len(),
        report.cases.iter().map(|c| c.model_mse).sum::<f64>() / n,
        report.cases.iter().map(|c| c.mean_fill_mse).sum::<f64>() / n
    );
    Ok(report)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
