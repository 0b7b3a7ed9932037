// Training masks: a segmentation mask is replaced by its bounding box one
// time in five, otherwise grown by a Gaussian blur and thresholded.

use lazydiff::data::synth_dataset;
use lazydiff::mask_protocol::{sample_mask, Dilation, BBOX_PROBABILITY};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> anyhow::Result<f64> {
    let sample = synth_dataset(1, 32, 2, 11)?.next().expect("one sample");
    let entity = &sample.entities[0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let d = Dilation::draw(32, &mut rng);
        let m = d.apply(entity)?;
        anyhow::ensure!(m.contains(entity));
        println!("{d:?}: entity {} px -> mask {} px", entity.count(), m.count());
    }

    let draws = 2000;
    let boxes = (0..draws)
        .filter(|_| matches!(Dilation::draw(32, &mut rng), Dilation::BoundingBox))
        .count();
    let freq = boxes as f64 / draws as f64;
    println!("bounding-box branch {freq:.3} of {draws} draws (target {BBOX_PROBABILITY})");

    let m = sample_mask(entity, &mut rng)?;
    let dir = tempfile::tempdir()?;
    m.save_png(dir.path().join("mask.png"))?;
    Ok(freq)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
