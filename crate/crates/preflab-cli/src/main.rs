//! `preflab` — command-line front end for the preference-loss laboratory.
//!
//! Every command resolves its configuration (defaults < TOML file <
//! environment < flags), writes a `manifest.json` into the output directory
//! before finalizing outputs, and exits with: 0 on success, 1 on a
//! tolerance violation, 2 on a configuration error, 3 on a numeric failure.

mod commands;
mod config;
mod errors;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::config::{env_var, FileConfig};
use crate::errors::CliError;
use crate::manifest::{sha256_hex, CommandSpec, RunManifest};

#[derive(Parser)]
#[command(
    name = "preflab",
    version,
    about = "Preference-loss laboratory: loss curves, gradient sweeps, \
             derivative checks, alignment oracles, deterministic training, \
             and the reward-hacking probe"
)]
struct Cli {
    /// TOML configuration file (sections per command plus `[common]`).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; created if missing.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for commands that draw randomness; ignored by pure-grid
    /// commands.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic instance and Bradley-Terry preference dataset.
    Gen(commands::GenArgs),
    /// Tabulate loss values and derivatives over a logits grid.
    Losscurve(commands::CurveArgs),
    /// Sweep |dL/dpi_l| over a log-spaced pi_l grid and fit power laws.
    Gradsweep(commands::SweepArgs),
    /// Check closed-form derivatives against central finite differences.
    Gradcheck(commands::CheckArgs),
    /// Verify the closed-form optimal-policy identities on an instance.
    OracleCheck(commands::OracleArgs),
    /// Train a tabular policy on a preference dataset, logging run records.
    Train(commands::TrainArgs),
    /// Compare losses on a feature-sharing instance under identical seeds.
    Hackprobe(commands::ProbeArgs),
    /// Re-run the fully resolved command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(clap::Args)]
struct ReplayArgs {
    /// Manifest to replay.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
}

fn main() {
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run() -> Result<i32, CliError> {
    let cli = Cli::parse();
    let file = FileConfig::load(cli.config.as_deref())?;
    let out_dir = resolve_out_dir(cli.out.as_deref(), &file)?;

    let mut input_digests = BTreeMap::new();
    if let Some(path) = &cli.config {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        input_digests.insert("config".to_string(), sha256_hex(&bytes));
    }

    let seed = cli.seed;
    let spec = match &cli.command {
        Command::Gen(args) => commands::resolve_gen(&file, args, seed)?,
        Command::Losscurve(args) => commands::resolve_losscurve(&file, args)?,
        Command::Gradsweep(args) => commands::resolve_gradsweep(&file, args)?,
        Command::Gradcheck(args) => commands::resolve_gradcheck(&file, args)?,
        Command::OracleCheck(args) => commands::resolve_oracle_check(&file, args, seed)?,
        Command::Train(args) => commands::resolve_train(&file, args, seed)?,
        Command::Hackprobe(args) => commands::resolve_hackprobe(&file, args, seed)?,
        Command::Replay(args) => {
            let manifest = RunManifest::load(&args.manifest)?;
            let bytes = std::fs::read(&args.manifest)?;
            input_digests.insert("replayed_manifest".to_string(), sha256_hex(&bytes));
            return run_spec(manifest.command, &out_dir, input_digests);
        }
    };
    run_spec(spec, &out_dir, input_digests)
}

fn resolve_out_dir(flag: Option<&Path>, file: &FileConfig) -> Result<PathBuf, CliError> {
    if let Some(dir) = flag {
        return Ok(dir.to_path_buf());
    }
    if let Some(dir) = env_var("OUT") {
        return Ok(PathBuf::from(dir));
    }
    if let Some(dir) = file.string("common", "out")? {
        return Ok(PathBuf::from(dir));
    }
    Ok(PathBuf::from("preflab-out"))
}

/// Writes the manifest, executes the command, then finalizes the manifest
/// with the output digests and wall-clock duration.
fn run_spec(
    spec: CommandSpec,
    out_dir: &Path,
    input_digests: BTreeMap<String, String>,
) -> Result<i32, CliError> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest::new(spec, input_digests);
    manifest.write(out_dir)?;

    let started = Instant::now();
    let result = commands::execute(&manifest.command, out_dir);
    manifest.duration_ms = started.elapsed().as_millis() as u64;
    match result {
        Ok((outputs, code)) => {
            manifest.outputs = outputs;
            manifest.write(out_dir)?;
            Ok(code)
        }
        Err(e) => {
            // Keep the manifest describing the attempted run.
            manifest.write(out_dir)?;
            Err(e)
        }
    }
}
