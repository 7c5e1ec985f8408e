use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use rkhs_ensemble::config::{RunConfig, Stage};
use rkhs_ensemble::pipeline;
use rkhs_ensemble::Result;

/// Kernel and Koopman ensemble forecasting on a quasi-geostrophic double gyre.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// `section.key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `section.key=value` setting, applied after the file.
    #[arg(long = "override", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Use 40 training and 40 test members.
    #[arg(long)]
    fast: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the base trajectory and store POD snapshots.
    Spinup(Common),
    /// Generate, spin up and store the training and test ensembles.
    Ensemble(Common),
    /// Generator spectra and eigenfunctions for each kernel.
    Koopman(Common),
    /// Global, modal and KMLE Lyapunov exponents and times.
    Lyapunov(Common),
    /// Reconstruction error curves of the test ensemble.
    Reconstruct(Common),
    /// Swath data assimilation error curves.
    Assimilate(Common),
    /// Every stage in order.
    All(Common),
    /// Print the effective configuration and per-stage hashes.
    ShowConfig(Common),
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if c.fast {
        cfg.apply_fast_profile();
    }
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (common, f): (&Common, fn(&RunConfig) -> Result<()>) = match &cli.command {
        Command::Spinup(c) => (c, pipeline::cmd_spinup),
        Command::Ensemble(c) => (c, pipeline::cmd_ensemble),
        Command::Koopman(c) => (c, pipeline::cmd_koopman),
        Command::Lyapunov(c) => (c, pipeline::cmd_lyapunov),
        Command::Reconstruct(c) => (c, pipeline::cmd_reconstruct),
        Command::Assimilate(c) => (c, pipeline::cmd_assimilate),
        Command::All(c) => (c, pipeline::cmd_all),
        Command::ShowConfig(c) => (c, |cfg| {
            print!("{}", cfg.render());
            for st in Stage::ALL {
                println!("# hash {} = {}", st.name(), cfg.stage_hash(st));
            }
            Ok(())
        }),
    };
    let cfg = load(common)?;
    f(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
