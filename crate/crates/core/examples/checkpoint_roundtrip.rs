// Checkpoints carry their configuration and tensor shapes, so a file for
// one variant refuses to load as another.

use lazydiff::checkpoint::{self, read_header};
use lazydiff::decoder::Variant;
use lazydiff::model::{LazyModel, ModelConfig};

pub fn run_example() -> anyhow::Result<usize> {
    let dir = tempfile::tempdir()?;
    let mut total = 0;
    for v in Variant::ALL {
        let model = LazyModel::new(ModelConfig::toy(v), 2)?;
        let path = dir.path().join(format!("{v}.lzdf"));
        checkpoint::save(&model, &path)?;
        let bytes = std::fs::read(&path)?;
        let header = read_header(&bytes)?;
        let back = checkpoint::load(&path, Some(v))?;
        anyhow::ensure!(back.params == model.params);
        println!("{v:<17} {:>3} tensors {:>8} scalars {:>8} bytes", header.tensors.len(), model.params.scalar_count(), bytes.len());
        total += bytes.len();
    }
    let wrong = checkpoint::load(dir.path().join("concat_hidden.lzdf"), Some(Variant::WeightedSum));
    println!("loading concat_hidden as weighted_sum: {}", wrong.as_ref().err().map_or("accepted".into(), |e| e.to_string()));
    anyhow::ensure!(wrong.is_err());
    Ok(total)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
