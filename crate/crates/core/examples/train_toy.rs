// Trains the toy model on synthetic shapes and writes a checkpoint and a
// loss trace. `LAZYDIFF_ITERS` sets the iteration count (default 200;
// 2000 gives a usable model in about two minutes).

use lazydiff::checkpoint;
use lazydiff::decoder::Variant;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::train::{train, LossTrace, TrainConfig};

pub fn run_example() -> anyhow::Result<LossTrace> {
    let iterations = std::env::var("LAZYDIFF_ITERS").ok().and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg = TrainConfig { variant: Variant::ConcatHidden, iterations, seed: 1, ..TrainConfig::default() };
    let mut model = LazyModel::new(ModelConfig::toy(cfg.variant), 0)?;
    let trace = train(&mut model, &cfg, &mut |r| {
        if r.iteration % 50 == 0 {
            println!("iter {:>5}  loss {:.4}  avg {:.4}  |g| {:.3}", r.iteration, r.loss, r.moving_average, r.grad_norm);
        }
    })?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("toy.lzdf");
    checkpoint::save(&model, &path)?;
    std::fs::write(dir.path().join("trace.csv"), trace.to_csv())?;
    let back = checkpoint::load(&path, Some(Variant::ConcatHidden))?;
    anyhow::ensure!(back.params == model.params);

    let early = trace.rows.get(9).map_or(f64::NAN, |r| r.moving_average);
    println!("moving average: iteration 10 {early:.4}, final {:.4}", trace.last_average().unwrap_or(f64::NAN));
    Ok(trace)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
