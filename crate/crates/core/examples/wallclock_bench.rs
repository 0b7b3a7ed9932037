// Machine-relative timings per phase. Ratios, not milliseconds, are the
// portable result: the per-step decode time should grow with the number
// of hole tokens while the encoder stays flat.

use lazydiff::bench::{benchmark_wallclock, TimingTable};
use lazydiff::decoder::Variant;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::raster::RgbImage;

pub fn run_example() -> anyhow::Result<TimingTable> {
    let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 0)?;
    let canvas = RgbImage::from_fn(3, 32, 32, |c, y, x| ((c * 11 + y * 5 + x * 3) % 32) as f64 / 31.0);
    let table = benchmark_wallclock(&model, &canvas, &[0.1, 0.25, 0.5, 1.0], 10, 2)?;
    print!("{}", table.to_csv());
    let measured = table.step_ratio(0.1, 1.0).expect("both ratios present");
    let analytic = table.row(1.0).expect("present").analytic_step_flops / table.row(0.1).expect("present").analytic_step_flops;
    println!(
        "per-step 1.0 vs 0.1: measured {measured:.2}x, analytic {analytic:.2}x; encoder spread {:.1}%",
        100.0 * table.encoder_spread()
    );
    for w in &table.warnings {
        println!("warning: {w}");
    }
    Ok(table)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
