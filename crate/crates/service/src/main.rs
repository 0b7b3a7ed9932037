use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = lazydiff_service::cli::Cli::parse();
    lazydiff_service::cli::run(cli, &mut std::io::stdout().lock())
}
