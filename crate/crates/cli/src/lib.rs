//! Command-line driver for `cap-eval`: scoring runs, prompt and dataset
//! generation, agreement tables and the annotation server.

pub mod args;
pub mod commands;
pub mod serve;

use anyhow::Result;

use crate::args::{BuildCommand, Cli, Command, GenCommand};

/// Exit status when a scoring run fails more pairs than allowed.
pub const EXIT_FAILURE_RATE: u8 = 3;

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

/// Runs one parsed command and returns the process exit status.
pub async fn run(cli: Cli) -> Result<u8> {
    let cfg_path = cli.config.as_deref();
    match &cli.command {
        Command::Score(a) => {
            let cfg = commands::load_config(cfg_path)?;
            let summary = commands::score(&cfg, a).await?;
            print_json(&summary)?;
            if summary.exceeded() {
                tracing::error!(
                    rate = summary.failure_rate,
                    max = summary.max_failure_rate,
                    "failure rate above the configured maximum"
                );
                return Ok(EXIT_FAILURE_RATE);
            }
        }
        Command::Gen(GenCommand::Prompts(a)) => {
            let cfg = commands::load_config(cfg_path)?;
            print_json(&commands::gen_prompts(&cfg, a).await?)?;
        }
        Command::Gen(GenCommand::Images(a)) => {
            let cfg = cfg_path.map(|p| commands::load_config(Some(p))).transpose()?;
            print_json(&commands::gen_images(cfg.as_ref(), a).await?)?;
        }
        Command::Build(BuildCommand::CpoDataset(a)) => {
            let cfg = cfg_path.map(|p| commands::load_config(Some(p))).transpose()?;
            print_json(&commands::build_cpo(cfg.as_ref(), a).await?)?;
        }
        Command::Agreement(a) => {
            let cfg = cfg_path.map(|p| commands::load_config(Some(p))).transpose()?;
            let summary = commands::agreement(cfg.as_ref(), a)?;
            print_json(&summary.files)?;
        }
        Command::Report(a) => {
            let cfg = cfg_path.map(|p| commands::load_config(Some(p))).transpose()?;
            print_json(&commands::report(cfg.as_ref(), a)?)?;
        }
        Command::Serve(a) => {
            let cfg = cfg_path.map(|p| commands::load_config(Some(p))).transpose()?;
            let (_, records) = commands::load_records(cfg.as_ref(), a.dataset.as_deref())?;
            let seed = a.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            let store = commands::annotation_store(records, &a.pairs, seed, a.quota, &a.log)?;
            serve::run(store, a.addr, a.static_dir.clone()).await?;
        }
    }
    Ok(0)
}
