use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ecfusion::cli::{
    cmd_ablate, cmd_eval, cmd_gen_scenes, cmd_selftest, cmd_train, RunConfig,
};
use ecfusion::error::Result;

/// BEV fusion operator kit: conflict-aware multi-sensor detection on a
/// synthetic benchmark.
#[derive(Parser)]
#[command(name = "ecfusion", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Two-stage training run: checkpoint + per-step loss CSV.
    Train {
        /// key=value config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override train.seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint: metrics CSV, optional PGM dumps.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-scene heatmap and flow-magnitude PGMs.
        #[arg(long)]
        dump_heatmaps: bool,
    },
    /// Train and evaluate the on/off grid over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated axes to ablate: sfa, dqr.
        #[arg(long, default_value = "sfa,dqr")]
        grid: String,
        /// Number of seeds per cell (master seed, master+1, ...).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suites and print a report table.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the train/eval scene pools as plain-text fixtures.
    GenScenes {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            cmd_train(&cfg, &out)
        }
        Cmd::Eval {
            checkpoint,
            config,
            seed,
            out,
            dump_heatmaps,
        } => {
            let cfg = load_config(&config, seed)?;
            cmd_eval(&checkpoint, &cfg, &out, dump_heatmaps)
        }
        Cmd::Ablate {
            config,
            seed,
            grid,
            seeds,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            cmd_ablate(&cfg, &grid, seeds, &out)
        }
        Cmd::Selftest { seed } => cmd_selftest(seed),
        Cmd::GenScenes { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            cmd_gen_scenes(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; anything else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
