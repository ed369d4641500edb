use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod run;

use config::{documented_keys, parse_config, ExperimentConfig};
use run::CliResult;

#[derive(Parser)]
#[command(name = "spikelab", version, about = "Spiking network initialization and training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network; writes metrics.csv, best.ckpt and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Train every scheme under every seed; writes compare.csv.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated init schemes.
        #[arg(long)]
        schemes: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Runs in parallel.
        #[arg(long)]
        jobs: Option<u64>,
    },
    /// Curvature of a checkpoint; writes hessian.json.
    Hessian {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/best.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Layerwise variance in a deep random stack; writes varprop.csv.
    Varprop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        schemes: Option<String>,
        #[arg(long)]
        depth: Option<u64>,
    },
    /// Per-layer initialization statistics; writes init_report.csv.
    InitReport {
        #[command(flatten)]
        common: Common,
    },
    /// List configuration keys with their types and defaults.
    Keys,
}

fn load(common: &Common, mut extra: Vec<String>) -> CliResult<ExperimentConfig> {
    let mut overrides = Vec::new();
    if let Some(out) = &common.out {
        overrides.push(format!("out={}", out.display()));
    }
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.append(&mut extra);
    overrides.extend(common.set.iter().cloned());
    Ok(parse_config(common.config.as_deref(), &overrides)?)
}

fn flag(key: &str, value: Option<impl ToString>) -> Vec<String> {
    value.map(|v| vec![format!("{key}={}", v.to_string())]).unwrap_or_default()
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { common } => commands::train(&load(&common, vec![])?),
        Command::Compare { common, schemes, seeds, jobs } => {
            let mut extra = flag("compare.schemes", schemes);
            extra.extend(flag("compare.seeds", seeds));
            extra.extend(flag("compare.jobs", jobs));
            commands::compare(&load(&common, extra)?)
        }
        Command::Hessian { common, checkpoint } => commands::hessian(&load(&common, vec![])?, checkpoint.as_deref()),
        Command::Varprop { common, schemes, depth } => {
            let mut extra = flag("compare.schemes", schemes);
            extra.extend(flag("varprop.depth", depth));
            commands::varprop(&load(&common, extra)?)
        }
        Command::InitReport { common } => commands::init_report(&load(&common, vec![])?),
        Command::Keys => {
            for (key, kind, default) in documented_keys() {
                println!("{key:<24} {default:<28} {kind}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
