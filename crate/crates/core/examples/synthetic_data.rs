// The procedural shapes dataset: each image carries a few labeled
// entities on a textured background, with per-entity masks.

use lazydiff::data::{synth_dataset, ShapeClass};

pub fn run_example() -> anyhow::Result<[usize; 4]> {
    let dir = tempfile::tempdir()?;
    let mut counts = [0usize; 4];
    for (i, s) in synth_dataset(16, 32, 2, 3)?.enumerate() {
        for &l in &s.labels {
            counts[l] += 1;
        }
        s.image.save_png(dir.path().join(format!("sample_{i:02}.png")))?;
        if i < 3 {
            let names: Vec<_> = s.labels.iter().map(|&l| ShapeClass::from_id(l).expect("valid").name()).collect();
            let sizes: Vec<_> = s.entities.iter().map(|m| m.count()).collect();
            println!("sample {i}: {names:?}, entity pixels {sizes:?}");
        }
    }
    println!("label counts over 16 images: {counts:?}");
    Ok(counts)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
