// Pixels and latent cells outside the mask never change: the latent blend
// is a cellwise select and the Poisson solve only has unknowns inside.

use lazydiff::blend::{poisson_blend, BlendProblem};
use lazydiff::patch::blend_latent;
use lazydiff::raster::{LatentImage, Mask, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let density = rng.random_range(0.02..0.9);
    let mut m = Mask::from_fn(h, w, |_, _| rng.random_bool(density));
    if m.is_empty() {
        m.set(rng.random_range(0..h), rng.random_range(0..w), true);
    }
    m
}

/// Number of trials in which something outside the mask changed.
pub fn violations(trials: usize, seed: u64) -> anyhow::Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..trials {
        let (h, w) = (rng.random_range(2..20), rng.random_range(2..20));
        let mask = random_mask(&mut rng, h, w);
        let z = LatentImage::from_fn(4, h, w, |_, _, _| rng.random_range(-3.0..3.0));
        let hole = LatentImage::from_fn(4, h, w, |_, _, _| rng.random_range(-3.0..3.0));
        let zb = blend_latent(&z, &hole, &mask)?;

        let base = RgbImage::from_fn(3, h, w, |_, _, _| rng.random::<f64>());
        let insert = RgbImage::from_fn(3, h, w, |_, _, _| rng.random::<f64>());
        let px = poisson_blend(&BlendProblem { base: base.clone(), insert, region: mask.clone() }, 1e-6, 4000)?;

        let mut ok = true;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    continue;
                }
                ok &= (0..4).all(|c| zb.get(c, y, x).to_bits() == z.get(c, y, x).to_bits());
                ok &= (0..3).all(|c| px.image.get(c, y, x).to_bits() == base.get(c, y, x).to_bits());
            }
        }
        bad += usize::from(!ok);
    }
    Ok(bad)
}

pub fn run_example() -> anyhow::Result<usize> {
    let bad = violations(100, 3)?;
    println!("100 random masks, {bad} with any change outside the hole");
    anyhow::ensure!(bad == 0);
    Ok(bad)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
