//! Command line: `train`, `sample`, `bench`, `ablate` and `serve`.
//!
//! Training flags mirror the fields of the TOML training config; a flag
//! given on the command line overrides the file. Commands that need a model
//! read the checkpoint from `--checkpoint` or `LAZYDIFF_CHECKPOINT`.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lazydiff::bench::benchmark_wallclock;
use lazydiff::checkpoint;
use lazydiff::cost::{edit_cost, speedup_curve};
use lazydiff::decoder::Variant;
use lazydiff::diffusion::SamplerOpts;
use lazydiff::evaluate::reconstruction_eval;
use lazydiff::model::{LazyModel, ModelConfig};
use lazydiff::pipeline::{apply_edit, EditRequest};
use lazydiff::raster::{Mask, RgbImage};
use lazydiff::session::{SessionManager, BLANK_GRAY};
use lazydiff::train::{train, TrainConfig};

use crate::api::{router, AppState};

pub const CHECKPOINT_ENV: &str = "LAZYDIFF_CHECKPOINT";

#[derive(Debug, Parser)]
#[command(name = "lazydiff", version, about = "Mask-proportional diffusion inpainting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy model on the synthetic shapes set and write a checkpoint.
    Train(TrainArgs),
    /// Apply one edit to an image file.
    Sample(SampleArgs),
    /// Analytic cost curves, optionally with a wall-clock benchmark.
    Bench(BenchArgs),
    /// Train and evaluate every decoder variant briefly.
    Ablate(AblateArgs),
    /// Run the HTTP session server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, env = CHECKPOINT_ENV)]
    pub checkpoint: Option<PathBuf>,
    /// Variant of a freshly initialized model when no checkpoint is given;
    /// with a checkpoint, the variant it must hold.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

impl ModelArgs {
    pub fn load(&self) -> anyhow::Result<LazyModel> {
        match &self.checkpoint {
            Some(p) => checkpoint::load(p, self.variant).with_context(|| format!("loading {}", p.display())),
            None => {
                let v = self.variant.unwrap_or(Variant::ConcatHidden);
                log::warn!("no checkpoint given, using an untrained {v} model");
                Ok(LazyModel::new(ModelConfig::toy(v), self.model_seed)?)
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub adam_eps: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub cfg_dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub average_window: Option<usize>,
    /// Seed of the parameter initialization.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace CSV.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

impl TrainArgs {
    pub fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => TrainConfig::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        over!(variant, iterations, batch_size, lr, weight_decay, beta1, beta2, adam_eps, max_grad_norm, cfg_dropout, seed, average_window);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 4.5)]
    pub guidance: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sdedit_strength: f64,
}

impl SamplerArgs {
    pub fn opts(&self) -> SamplerOpts {
        SamplerOpts {
            steps: self.steps,
            guidance_scale: self.guidance,
            seed: self.seed,
            sdedit_strength: self.sdedit_strength,
        }
    }
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Starting canvas; blank gray when absent.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Grayscale PNG, nonzero pixels are regenerated.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub label: usize,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub patch: Option<PathBuf>,
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    Toy,
    Full,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "concat_hidden")]
    pub variant: Variant,
    #[arg(long, default_value = "regenerate_image")]
    pub baseline: Variant,
    #[arg(long, value_enum, default_value_t = Scale::Full)]
    pub scale: Scale,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 4.5)]
    pub guidance: f64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Also time the toy model on this machine.
    #[arg(long)]
    pub wallclock: bool,
    #[arg(long, default_value_t = 20)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<Variant>,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => run_train(&a, out),
        Command::Sample(a) => run_sample(&a, out),
        Command::Bench(a) => run_bench(&a, out),
        Command::Ablate(a) => run_ablate(&a, out),
        Command::Serve(a) => {
            let model = a.model.load()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(Arc::new(model), a.addr))
        }
    }
}

pub fn run_train(a: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = a.resolve()?;
    let mut model = LazyModel::new(ModelConfig::toy(cfg.variant), a.model_seed)?;
    let every = (cfg.iterations / 20).max(1);
    let trace = train(&mut model, &cfg, &mut |r| {
        if r.iteration % every == 0 || r.iteration == cfg.iterations {
            log::info!("iter {} loss {:.4} avg {:.4}", r.iteration, r.loss, r.moving_average);
        }
    })?;
    checkpoint::save(&model, &a.out)?;
    if let Some(p) = &a.trace {
        write_file(p, trace.to_csv().as_bytes())?;
    }
    writeln!(
        out,
        "trained {} for {} iterations, final average loss {:.4}, wrote {}",
        cfg.variant,
        cfg.iterations,
        trace.last_average().unwrap_or(f64::NAN),
        a.out.display()
    )?;
    Ok(())
}

pub fn run_sample(a: &SampleArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let model = a.model.load()?;
    let size = model.config.canvas;
    let canvas = match &a.image {
        Some(p) => RgbImage::load_png(p)?,
        None => RgbImage::filled(3, size, size, BLANK_GRAY),
    };
    let req = EditRequest {
        mask: Mask::load_png(&a.mask)?,
        label: a.label,
        opts: a.sampler.opts(),
    };
    let res = apply_edit(&model, &canvas, &req, &mut |t| log::debug!("step {}/{}", t.step, t.total))?;
    res.canvas.save_png(&a.out)?;
    if let Some(p) = &a.patch {
        res.patch.save_png(p)?;
    }
    if let Some(p) = &a.telemetry {
        write_file(p, &serde_json::to_vec_pretty(&res.telemetry)?)?;
    }
    let t = &res.telemetry;
    writeln!(
        out,
        "{}: k={} of N={} tokens, {} steps, {:.1} ms, analytic speedup over full regeneration {:.2}",
        t.variant, t.k, t.n, t.steps, t.timings.total_ms, t.analytic_speedup
    )?;
    Ok(())
}

pub fn run_bench(a: &BenchArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = match a.scale {
        Scale::Toy => ModelConfig::toy(a.variant),
        Scale::Full => ModelConfig::full(a.variant),
    };
    let curve = speedup_curve(&cfg, a.baseline, &a.ratios, a.steps, a.guidance)?;
    let csv = curve.to_csv();
    out.write_all(csv.as_bytes())?;
    let mut json = serde_json::json!({ "analytic": curve });
    if a.wallclock {
        let model = LazyModel::new(ModelConfig::toy(a.variant), 0)?;
        let canvas = RgbImage::filled(3, model.config.canvas, model.config.canvas, BLANK_GRAY);
        let table = benchmark_wallclock(&model, &canvas, &a.ratios, a.repetitions, a.warmup)?;
        writeln!(out)?;
        out.write_all(table.to_csv().as_bytes())?;
        for w in &table.warnings {
            writeln!(out, "warning: {w}")?;
        }
        json["wallclock"] = table.json_series();
    }
    if let Some(p) = &a.csv {
        write_file(p, csv.as_bytes())?;
    }
    if let Some(p) = &a.json {
        write_file(p, &serde_json::to_vec_pretty(&json)?)?;
    }
    Ok(())
}

pub fn run_ablate(a: &AblateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let variants = if a.variants.is_empty() { Variant::ALL.to_vec() } else { a.variants.clone() };
    if a.samples == 0 {
        bail!("ablate needs at least one evaluation sample");
    }
    let mut csv = String::from("variant,iterations,final_avg_loss,win_rate,model_mse,mean_fill_mse,step_flops_r10,speedup_r10\n");
    writeln!(out, "{:<18} {:>10} {:>8} {:>10} {:>12} {:>8}", "variant", "avg_loss", "win", "model_mse", "step_flops", "speedup")?;
    for v in variants {
        let mut model = LazyModel::new(ModelConfig::toy(v), a.seed)?;
        let cfg = TrainConfig {
            variant: v,
            iterations: a.iterations,
            seed: a.seed,
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &cfg, &mut |_| {})?;
        let report = reconstruction_eval(
            &model,
            a.samples,
            a.seed.wrapping_add(1),
            SamplerOpts {
                steps: a.steps,
                sdedit_strength: 0.3,
                ..SamplerOpts::default()
            },
        )?;
        let n = report.cases.len().max(1) as f64;
        let model_mse = report.cases.iter().map(|c| c.model_mse).sum::<f64>() / n;
        let fill_mse = report.cases.iter().map(|c| c.mean_fill_mse).sum::<f64>() / n;
        let cost = edit_cost(&model.config, 0.1, a.steps, 4.5)?;
        let base = edit_cost(&model.config.with_variant(Variant::RegenerateImage), 0.1, a.steps, 4.5)?;
        let avg = trace.last_average().unwrap_or(f64::NAN);
        let speedup = base.total / cost.total;
        csv.push_str(&format!(
            "{v},{},{avg:.6},{:.4},{model_mse:.6},{fill_mse:.6},{:.6e},{speedup:.4}\n",
            a.iterations,
            report.win_rate(),
            cost.decoder_per_eval
        ));
        writeln!(
            out,
            "{:<18} {:>10.4} {:>8.2} {:>10.5} {:>12.3e} {:>8.2}",
            v.name(),
            avg,
            report.win_rate(),
            model_mse,
            cost.decoder_per_eval,
            speedup
        )?;
    }
    if let Some(p) = &a.csv {
        write_file(p, csv.as_bytes())?;
    }
    Ok(())
}

/// Serves the API until ctrl-c.
pub async fn serve(model: Arc<LazyModel>, addr: SocketAddr) -> anyhow::Result<()> {
    let app = router(AppState::new(Arc::new(SessionManager::new(model))));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
