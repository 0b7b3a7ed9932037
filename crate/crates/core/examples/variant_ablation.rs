// The same edit through every decoder variant: how many tokens each one
// denoises and what that costs, next to the analytic count at full size.

use lazydiff::cost::edit_cost;
use lazydiff::data::synth_dataset;
use lazydiff::decoder::Variant;
use lazydiff::diffusion::SamplerOpts;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::pipeline::{apply_edit, EditRequest, Telemetry};
use lazydiff::raster::Mask;

pub fn run_example() -> anyhow::Result<Vec<Telemetry>> {
    let image = synth_dataset(1, 32, 2, 4)?.next().expect("one sample").image;
    let mask = Mask::from_fn(32, 32, |y, x| (10..18).contains(&y) && (6..16).contains(&x));
    let req = EditRequest { mask, label: 3, opts: SamplerOpts { steps: 5, seed: 9, ..SamplerOpts::default() } };
    println!("{:<17} {:>4} {:>6} {:>11} {:>9} {:>15}", "variant", "k", "rows", "token-steps", "ms", "full TFLOP@10%");
    let mut out = Vec::new();
    for v in Variant::ALL {
        let model = LazyModel::new(ModelConfig::toy(v), 1)?;
        let t = apply_edit(&model, &image, &req, &mut |_| {})?.telemetry;
        let big = edit_cost(&ModelConfig::full(v), 0.1, 50, 4.5)?.total / 1e12;
        println!("{:<17} {:>4} {:>6} {:>11} {:>9.1} {:>15.1}", v.name(), t.k, t.decoder_tokens, t.token_steps, t.timings.total_ms, big);
        out.push(t);
    }
    Ok(out)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
