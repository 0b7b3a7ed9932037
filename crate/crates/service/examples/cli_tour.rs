// The command line, called in process: a short training run, one edit
// from files, and the cost tables.

use clap::Parser;
use lazydiff::raster::Mask;
use lazydiff_service::cli::{run, Cli};

fn lazydiff(args: &[&str]) -> anyhow::Result<String> {
    let cli = Cli::try_parse_from(std::iter::once("lazydiff").chain(args.iter().copied()))?;
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8(out)?)
}

pub fn run_example() -> anyhow::Result<String> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).display().to_string();

    std::fs::write(p("train.toml"), "variant = \"weighted_sum\"\niterations = 20\nbatch_size = 2\n")?;
    print!("{}", lazydiff(&["train", "--config", &p("train.toml"), "--iterations", "10", "--out", &p("ws.lzdf"), "--trace", &p("trace.csv")])?);

    Mask::from_fn(32, 32, |y, x| (4..12).contains(&y) && (4..20).contains(&x)).save_png(p("mask.png"))?;
    print!(
        "{}",
        lazydiff(&[
            "sample", "--checkpoint", &p("ws.lzdf"), "--mask", &p("mask.png"), "--label", "2", "--steps", "6",
            "--out", &p("out.png"), "--telemetry", &p("telemetry.json"),
        ])?
    );

    let table = lazydiff(&["bench", "--ratios", "0.1,0.25,1.0", "--json", &p("bench.json")])?;
    print!("{table}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(p("bench.json"))?)?;
    anyhow::ensure!(json["analytic"]["points"].as_array().map_or(0, Vec::len) == 3);
    Ok(table)
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example().map(|_| ())
}
