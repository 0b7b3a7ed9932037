// With its context projection initialized to the identity, the lazy
// decoder on a full mask computes exactly what the bare backbone does.

use lazydiff::decoder::Variant;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::nn::{standard_normal, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest absolute difference between the two forwards, over `trials`
/// random parameter draws.
pub fn max_deviation(trials: u64) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for id in model.params.ids().collect::<Vec<_>>() {
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = standard_normal(&shape, &mut rng).scale(0.3);
        }
        model.decoder.init_identity(&mut model.params)?;

        let geom = model.decoder.geom;
        let pos = geom.positions();
        let x = standard_normal(&[pos.len(), model.config.token_dim()], &mut rng);
        let ctx: Tensor = standard_normal(&[pos.len(), model.config.encoder.dim], &mut rng);
        let t = 1.0 + (seed * 97 % 999) as f64;
        let label = (seed % 4) as usize;

        let mut g = Graph::new(&model.params);
        let xv = g.constant(x);
        let cv = g.constant(ctx);
        let lazy = model.decoder.forward(&mut g, xv, &pos, t, label, cv)?;
        let bare = model.decoder.forward_backbone(&mut g, xv, &pos, t, label)?;
        worst = worst
            .max(g.value(lazy.eps).max_abs_diff(g.value(bare.eps)))
            .max(g.value(lazy.var).max_abs_diff(g.value(bare.var)));
    }
    Ok(worst)
}

pub fn run_example() -> anyhow::Result<f64> {
    let d = max_deviation(3)?;
    println!("max |lazy - backbone| over 3 random models: {d:.3e}");
    anyhow::ensure!(d <= 1e-5);
    Ok(d)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
