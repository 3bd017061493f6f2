use clap::Parser;

use ensdown_cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = run(Cli::parse())?;
    log::info!("wrote {}", out.display());
    Ok(())
}
