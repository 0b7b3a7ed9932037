// Analytic FLOPs for every variant at the full-size configuration:
// speedup versus regenerating the image, the full-mask overhead of the
// lazy variants and the ratio where a crop baseline catches up.

use lazydiff::cost::{crossover_ratio, flop_crossover_ratio, full_mask_overhead, speedup_curve, SpeedupCurve};
use lazydiff::decoder::Variant;
use lazydiff::model::ModelConfig;

pub fn run_example() -> anyhow::Result<SpeedupCurve> {
    let cfg = ModelConfig::full(Variant::ConcatHidden);
    let ratios = [0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0];
    let curve = speedup_curve(&cfg, Variant::RegenerateImage, &ratios, 50, 4.5)?;
    print!("{}", curve.to_csv());

    for v in Variant::ALL.into_iter().filter(|v| v.is_lazy()) {
        let o = full_mask_overhead(&ModelConfig::full(v), v)?;
        println!("{v:<17} full-mask overhead vs regenerate_image: {:+.3}%", 100.0 * o);
    }
    let crop = cfg.crop_canvas();
    println!(
        "half-side crop: token crossover {:.4}, FLOP crossover {:.4}",
        crossover_ratio(&cfg, crop)?,
        flop_crossover_ratio(&cfg, crop)?
    );
    let p10 = curve.points.iter().find(|p| p.ratio == 0.1).expect("0.1 is in the list");
    anyhow::ensure!(p10.per_step >= 10.0, "per-step speedup at 10% is {}", p10.per_step);
    Ok(curve)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
