use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};
use revlab::revertlm::PurifierVariant;
use revlab::runner::{execute, RunConfig, Subcommand};
use revlab::tinylm::TapPoint;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    SynthData,
    TrainVictim,
    Capture,
    AttackTrain,
    AttackEval,
    MiScan,
    SublayerSweep,
    DepthSweep,
    PurifierAblation,
    Report,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::SynthData => Subcommand::SynthData,
            Command::TrainVictim => Subcommand::TrainVictim,
            Command::Capture => Subcommand::Capture,
            Command::AttackTrain => Subcommand::AttackTrain,
            Command::AttackEval => Subcommand::AttackEval,
            Command::MiScan => Subcommand::MiScan,
            Command::SublayerSweep => Subcommand::SublayerSweep,
            Command::DepthSweep => Subcommand::DepthSweep,
            Command::PurifierAblation => Subcommand::PurifierAblation,
            Command::Report => Subcommand::Report,
        }
    }
}

/// Representation-inversion experiments on split transformer victims.
#[derive(Debug, Parser)]
#[command(name = "revlab", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run config (TOML). Defaults to the bundled default config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Attack tap as BLOCK:POSITION, e.g. 0:block_out.
    #[arg(long)]
    tap: Option<TapPoint>,
    #[arg(long)]
    purifier: Option<PurifierVariant>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default_config(),
    };
    cfg.apply_env();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out_dir = o;
    }
    if let Some(t) = cli.tap {
        cfg.taps.retain(|x| *x != t);
        cfg.taps.insert(0, t);
    }
    if let Some(p) = cli.purifier {
        cfg.attack.purifier.variant = p;
    }
    let m = execute(cli.command.into(), &cfg)?;
    println!("{}", serde_json::to_string_pretty(&m.aggregates)?);
    eprintln!(
        "{} done: {} artifacts, manifest {}",
        m.subcommand,
        m.artifacts.len(),
        cfg.out_dir.join("manifests").join(format!("{}.json", m.subcommand)).display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<revlab::Error>())
                .map_or(1, revlab::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
