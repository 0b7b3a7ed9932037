// Backprop against central differences for each layer type and for the
// full training loss of a 2-layer model.

use lazydiff::decoder::Variant;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::nn::{
    grad_check, standard_normal, Graph, Init, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore,
    TransformerBlock, Var,
};
use lazydiff::raster::{Mask, RgbImage};
use lazydiff::train::{loss_grad_check, TrainExample};
use lazydiff::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randomize(ps: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for id in ps.ids().collect::<Vec<_>>() {
        let name = ps.name(id);
        // Wider query/key weights keep attention off the uniform plateau.
        let std = if name.ends_with(".q.weight") || name.ends_with(".k.weight") { 0.5 } else { 0.1 };
        let shape = ps.get(id).shape().to_vec();
        *ps.get_mut(id) = standard_normal(&shape, rng).scale(std);
    }
}

fn probe(g: &mut Graph<'_>, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = g.constant(standard_normal(g.value(y).shape(), &mut rng));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

/// `(name, max relative error, tolerance)` per check.
pub fn layer_reports(seed: u64) -> anyhow::Result<Vec<(String, f64, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "lin", 6, 5, true, Init::TruncNormal(0.3), &mut rng);
    let x = standard_normal(&[4, 6], &mut rng);
    let r = grad_check(&mut ps, &[x], |g, v| { let y = lin.forward(g, v[0])?; probe(g, y) }, 1e-3, usize::MAX, &mut rng)?;
    out.push(("linear".to_string(), r.max_rel_error, 1e-4));

    let mut ps = ParamStore::new();
    let ln = LayerNorm::new(&mut ps, "ln", 8);
    let mlp = Mlp::new(&mut ps, "mlp", 8, &mut rng);
    randomize(&mut ps, &mut rng);
    let x = standard_normal(&[3, 8], &mut rng);
    let r = grad_check(&mut ps, &[x], |g, v| { let h = ln.forward(g, v[0])?; let y = mlp.forward(g, h)?; probe(g, y) }, 1e-3, usize::MAX, &mut rng)?;
    out.push(("layer norm + mlp".to_string(), r.max_rel_error, 1e-3));

    let mut ps = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut ps, "attn", 8, 8, 2, &mut rng)?;
    randomize(&mut ps, &mut rng);
    let (q, kv) = (standard_normal(&[3, 8], &mut rng), standard_normal(&[5, 8], &mut rng));
    let r = grad_check(&mut ps, &[q, kv], |g, v| { let y = attn.forward(g, v[0], v[1])?; probe(g, y) }, 1e-3, usize::MAX, &mut rng)?;
    out.push(("attention".to_string(), r.max_rel_error, 1e-3));

    let mut ps = ParamStore::new();
    let block = TransformerBlock::modulated(&mut ps, "blk", 8, 2, Some(6), &mut rng)?;
    randomize(&mut ps, &mut rng);
    let (x, c, ctx) = (standard_normal(&[3, 8], &mut rng), standard_normal(&[1, 8], &mut rng), standard_normal(&[4, 6], &mut rng));
    let r = grad_check(&mut ps, &[x, c, ctx], |g, v| { let y = block.forward(g, v[0], Some(v[1]), Some(v[2]))?; probe(g, y) }, 1e-3, 48, &mut rng)?;
    out.push(("modulated block + cross attention".to_string(), r.max_rel_error, 1e-3));
    Ok(out)
}

pub fn training_loss_report(variant: Variant, seed: u64) -> anyhow::Result<f64> {
    let mut cfg = ModelConfig::toy(variant);
    cfg.decoder.layers = 2;
    cfg.encoder.layers = 2;
    let mut model = LazyModel::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    randomize(&mut model.params, &mut rng);
    let ex = TrainExample {
        image: RgbImage::from_fn(3, 32, 32, |c, y, x| ((c + 1) * (y * 3 + x * 7) % 17) as f64 / 17.0),
        mask: Mask::from_fn(32, 32, |y, x| (6..18).contains(&y) && (9..20).contains(&x)),
        label: 2,
    };
    Ok(loss_grad_check(&model, &ex, 300, seed, 1e-3, 4, &mut rng)?.max_rel_error)
}

pub fn run_example() -> anyhow::Result<()> {
    for (name, err, tol) in layer_reports(1)? {
        println!("{name:<34} {err:.2e} (tolerance {tol:.0e})");
        anyhow::ensure!(err < tol, "{name}");
    }
    let err = training_loss_report(Variant::ConcatHidden, 0)?;
    println!("{:<34} {err:.2e} (tolerance 1e-2)", "2-layer training loss");
    anyhow::ensure!(err < 1e-2);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
