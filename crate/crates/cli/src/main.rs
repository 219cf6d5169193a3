//! `etfcd`: run the continual discovery protocol from a TOML config and write CSV/JSON reports.
//!
//! Exit codes: 0 success, 2 configuration or parse error, 3 runtime failure, 4 infeasible setup.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::Failure;
use config::{Overrides, RunConfig};
use etfcd_core::Preset;

#[derive(Parser)]
#[command(
    name = "etfcd",
    version,
    about = "Fixed-ETF continual category discovery experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the protocol once; writes stages.csv, summary.json, nc_trace.csv, frame.csv, encoder.ckpt.
    Run(Common),
    /// Supervised/unsupervised alignment grid over several seeds; writes ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Seeds per cell (overrides `repeats`).
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Selection-ratio sweep; writes alpha_sweep.csv.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated values in (0, 1] (overrides `alphas`).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Frame Gram check and, given embeddings, collapse diagnostics as JSON on stdout.
    Diag {
        #[arg(long)]
        frame: PathBuf,
        /// Embedding table (id,stage,split,label,f0,...); rows are embedded first if a checkpoint is given.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, requires = "embeddings")]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Failure> {
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            preset: self.preset.map(|p| match p {
                PresetArg::Paper => Preset::Paper,
                PresetArg::Desk => Preset::Desk,
            }),
        };
        Ok(config::load(&self.config, &overrides)?)
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(common) => commands::run(&common.load()?),
        Command::Ablate { common, seeds } => {
            let mut cfg = common.load()?;
            if let Some(n) = seeds {
                cfg.repeats = n.max(1);
            }
            commands::ablate(&cfg)
        }
        Command::SweepAlpha { common, alphas, seeds } => {
            let mut cfg = common.load()?;
            if let Some(a) = alphas {
                config::check_alphas(&a)?;
                cfg.alphas = a;
            }
            if let Some(n) = seeds {
                cfg.repeats = n.max(1);
            }
            commands::sweep_alpha(&cfg)
        }
        Command::Diag {
            frame,
            embeddings,
            checkpoint,
        } => {
            let report = commands::diag(&frame, embeddings.as_deref(), checkpoint.as_deref())?;
            commands::print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
