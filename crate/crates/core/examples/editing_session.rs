// Incremental editing: a session applies edits one after another on its
// canvas, records them, and a replay of the history rebuilds the same
// canvas bit for bit.

use std::sync::Arc;

use lazydiff::decoder::Variant;
use lazydiff::diffusion::SamplerOpts;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::raster::Mask;
use lazydiff::session::{CanvasInit, SessionManager};

pub fn run_example() -> anyhow::Result<usize> {
    let model = LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 0)?;
    let sessions = SessionManager::new(Arc::new(model));
    let id = sessions.create(32, CanvasInit::Blank)?;

    let edits = [((2, 2, 10), 0), ((14, 6, 12), 1), ((8, 20, 9), 2), ((22, 22, 8), 3)];
    for (i, ((y0, x0, side), label)) in edits.into_iter().enumerate() {
        let mask = Mask::from_fn(32, 32, |y, x| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x));
        let before = sessions.get_state(&id)?.canvas;
        let (index, out) = sessions.apply_edit(&id, &mask, label, SamplerOpts { steps: 6, seed: i as u64, ..SamplerOpts::default() }, &mut |_| {})?;
        let untouched = (0..32).all(|y| (0..32).all(|x| mask.get(y, x) || (0..3).all(|c| out.canvas.get(c, y, x) == before.get(c, y, x))));
        anyhow::ensure!(untouched, "edit {index} changed pixels outside its mask");
        let t = out.telemetry;
        println!("edit {index}: k={} N={} token-steps {} speedup {:.2}x", t.k, t.n, t.token_steps, t.analytic_speedup);
    }

    let export = sessions.export_history(&id)?;
    let json = serde_json::to_string(&export)?;
    let replayed = sessions.replay(&serde_json::from_str(&json)?)?;
    let same = sessions.get_state(&replayed)?.canvas == sessions.get_state(&id)?.canvas;
    println!("history: {} edits, {} bytes of JSON, replay identical: {same}", export.edits.len(), json.len());
    anyhow::ensure!(same);
    Ok(export.edits.len())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
