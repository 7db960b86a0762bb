//! `specrecon` command-line front end.
//!
//! Every subcommand writes into a staging directory next to `--out` and
//! renames it into place only on success, together with a `manifest.toml`
//! that records the fully resolved invocation. `specrecon replay` re-runs a
//! manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub mod commands;
pub mod config;
pub mod manifest;
mod staging;

use commands::{
    calibrate::CalibrateArgs, evaluate::EvaluateArgs, info::InfoArgs, reconstruct::ReconstructArgs,
    simulate::SimulateArgs, study::CssStudyArgs, train::TrainArgs,
};
use config::FlatConfig;
use manifest::RunManifest;
pub use staging::Staging;

#[derive(Debug, Parser)]
#[command(name = "specrecon", version, about = "Hyperspectral reconstruction from RGB")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct Common {
    /// Seed for initialization and shuffling (overrides `seed` in --config)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Force single-threaded, bitwise-reproducible execution
    #[arg(long, global = true)]
    pub sequential: bool,
    /// Flat `key = value` configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (replaced atomically on success)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Recover camera spectral sensitivity from a monochromator sweep
    Calibrate(CalibrateArgs),
    /// Render RGB from hyperspectral cubes and cut aligned training pairs
    Simulate(SimulateArgs),
    /// Train PTNet on a pair set
    Train(TrainArgs),
    /// Reconstruct a hyperspectral cube from RGB (or from a simulated cube)
    Reconstruct(ReconstructArgs),
    /// Compare predicted and ground-truth cubes
    Evaluate(EvaluateArgs),
    /// Reconstruct the same cubes under several CSS tables
    CssStudy(CssStudyArgs),
    /// Re-run the invocation recorded in a manifest
    Replay(ReplayArgs),
    /// Print a model configuration and its parameter count
    Info(InfoArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Calibrate(_) => "calibrate",
            Command::Simulate(_) => "simulate",
            Command::Train(_) => "train",
            Command::Reconstruct(_) => "reconstruct",
            Command::Evaluate(_) => "evaluate",
            Command::CssStudy(_) => "css-study",
            Command::Replay(_) => "replay",
            Command::Info(_) => "info",
        }
    }

    fn absolutize(&mut self) -> Result<()> {
        match self {
            Command::Calibrate(a) => a.absolutize(),
            Command::Simulate(a) => a.absolutize(),
            Command::Train(a) => a.absolutize(),
            Command::Reconstruct(a) => a.absolutize(),
            Command::Evaluate(a) => a.absolutize(),
            Command::CssStudy(a) => a.absolutize(),
            Command::Replay(a) => absolute(&mut a.manifest),
            Command::Info(a) => match &mut a.checkpoint {
                Some(p) => absolute(p),
                None => Ok(()),
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// manifest.toml written by an earlier run
    #[arg(long)]
    pub manifest: PathBuf,
}

pub(crate) fn absolute(p: &mut PathBuf) -> Result<()> {
    *p = std::path::absolute(&*p).with_context(|| format!("resolving {}", p.display()))?;
    Ok(())
}

/// Everything a subcommand needs besides its own arguments.
pub struct RunContext<'a> {
    pub common: &'a Common,
    pub config: &'a FlatConfig,
    pub stage: &'a Staging,
}

/// What a subcommand reports back for the manifest.
#[derive(Debug, Default)]
pub struct Outcome {
    /// Fully materialized settings, recorded under `[resolved]`.
    pub resolved: FlatConfig,
}

pub fn run(cli: Cli) -> Result<()> {
    let Cli {
        mut common,
        mut command,
    } = cli;
    command.absolutize()?;
    match command {
        Command::Info(args) => commands::info::run(&args),
        Command::Replay(args) => {
            let recorded = RunManifest::read(&args.manifest)?;
            if matches!(recorded.command, Command::Replay(_) | Command::Info(_)) {
                bail!("manifest records `{}`, which cannot be replayed", recorded.command.name());
            }
            let mut replay_common = recorded.common.clone();
            if let Some(out) = common.out.take() {
                replay_common.out = Some(out);
            }
            replay_common.sequential |= common.sequential;
            execute(replay_common, recorded.command, recorded.resolved)
        }
        command => {
            let config = match &mut common.config {
                Some(path) => {
                    absolute(path)?;
                    FlatConfig::read(path)?
                }
                None => FlatConfig::default(),
            };
            execute(common, command, config)
        }
    }
}

fn execute(mut common: Common, command: Command, config: FlatConfig) -> Result<()> {
    let out = common
        .out
        .as_mut()
        .with_context(|| format!("`{}` needs --out <dir>", command.name()))?;
    absolute(out)?;
    let out = out.clone();
    let stage = Staging::new(&out)?;
    let ctx = RunContext {
        common: &common,
        config: &config,
        stage: &stage,
    };
    let outcome = match &command {
        Command::Calibrate(a) => commands::calibrate::run(a, &ctx),
        Command::Simulate(a) => commands::simulate::run(a, &ctx),
        Command::Train(a) => commands::train::run(a, &ctx),
        Command::Reconstruct(a) => commands::reconstruct::run(a, &ctx),
        Command::Evaluate(a) => commands::evaluate::run(a, &ctx),
        Command::CssStudy(a) => commands::study::run(a, &ctx),
        Command::Replay(_) | Command::Info(_) => unreachable!("handled by run"),
    }?;
    let manifest = RunManifest::new(&common, command, outcome.resolved, stage.files()?);
    manifest.write(&stage.path(manifest::MANIFEST_FILE))?;
    stage.commit()?;
    Ok(())
}

/// Sorted `*.hsc` files in a directory.
pub(crate) fn list_cubes(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut files = Vec::new();
    for e in entries {
        let path = e?.path();
        if path.extension().is_some_and(|x| x == "hsc") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!("no .hsc cubes in {}", dir.display());
    }
    Ok(files)
}

pub(crate) fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Parses `a,b,c` into numbers.
pub(crate) fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| anyhow::anyhow!("{what}: `{p}` is not a valid number"))
        })
        .collect()
}
