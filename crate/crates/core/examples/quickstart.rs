// One lazy edit on a synthetic canvas: only the tokens under the mask go
// through the diffusion decoder, then the result is blended back.

use lazydiff::data::synth_dataset;
use lazydiff::decoder::Variant;
use lazydiff::diffusion::SamplerOpts;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::pipeline::{apply_edit, EditRequest, Telemetry};
use lazydiff::raster::Mask;

pub fn run_example() -> anyhow::Result<Telemetry> {
    let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 0)?;
    let sample = synth_dataset(1, 32, 2, 7)?.next().expect("one sample");
    let mask = Mask::from_fn(32, 32, |y, x| (4..14).contains(&y) && (18..30).contains(&x));

    let mut ticks = 0;
    let out = apply_edit(
        &model,
        &sample.image,
        &EditRequest {
            mask: mask.clone(),
            label: 1,
            opts: SamplerOpts { steps: 10, seed: 42, ..SamplerOpts::default() },
        },
        &mut |_| ticks += 1,
    )?;
    anyhow::ensure!(ticks == 10, "expected one tick per step");

    let dir = tempfile::tempdir()?;
    sample.image.save_png(dir.path().join("before.png"))?;
    out.canvas.save_png(dir.path().join("after.png"))?;
    mask.save_png(dir.path().join("mask.png"))?;

    let t = out.telemetry;
    println!(
        "{}: {} of {} tokens, {} token-steps, {:.1} ms, {:.1}x fewer FLOPs than regenerating the image",
        t.variant, t.k, t.n, t.token_steps, t.timings.total_ms, t.analytic_speedup
    );
    Ok(t)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
