//! Command-line entry point. Exit codes: 0 success, 1 configuration
//! problems (including bad flags), 2 missing artifacts, 3 runtime errors.

use clap::{Parser, Subcommand};
use commin_harness::experiment;
use commin_harness::Config;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "commin",
    about = "Wireless image transmission with diffusion-based restoration",
    version
)]
struct Cli {
    /// Experiment description file.
    #[arg(long, global = true, default_value = "configs/desk32.toml")]
    config: PathBuf,

    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the procedural dataset into the configured directory.
    GenDataset,
    /// Train the joint source-channel codec.
    TrainJscc,
    /// Push training images through the trained codec to build
    /// clean/degraded pairs for each SNR setting.
    GenPairs {
        /// SNR settings in dB; defaults to the evaluation grid.
        #[arg(long, allow_negative_numbers = true, num_args = 1..)]
        snr: Option<Vec<f64>>,
    },
    /// Train one invertible network per SNR setting from stored pairs.
    TrainInn {
        /// SNR settings in dB; defaults to the evaluation grid.
        #[arg(long, allow_negative_numbers = true, num_args = 1..)]
        snr: Option<Vec<f64>>,
    },
    /// Train the diffusion noise predictor.
    TrainDiffusion,
    /// Train the perceptual-metric feature extractor.
    TrainExtractor,
    /// Sweep the SNR grid over the test split and append result rows.
    Evaluate,
    /// Aggregate results into a CSV summary and two SVG plots.
    Report,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let mut cfg = match Config::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    if let Err(e) = cfg.apply_overrides(cli.seed, cli.out.as_deref()) {
        eprintln!("error: {e}");
        return e.exit_code();
    }

    let grid_or = |snr: Option<Vec<f64>>, cfg: &Config| {
        snr.unwrap_or_else(|| cfg.evaluate.snr_grid_db.clone())
    };
    let outcome = match cli.command {
        Command::GenDataset => experiment::cmd_gen_dataset(&cfg),
        Command::TrainJscc => experiment::cmd_train_jscc(&cfg).map(|_| ()),
        Command::GenPairs { snr } => {
            let snrs = grid_or(snr, &cfg);
            experiment::cmd_gen_pairs(&cfg, &snrs)
        }
        Command::TrainInn { snr } => {
            let snrs = grid_or(snr, &cfg);
            experiment::cmd_train_inn(&cfg, &snrs).map(|_| ())
        }
        Command::TrainDiffusion => experiment::cmd_train_diffusion(&cfg).map(|_| ()),
        Command::TrainExtractor => experiment::cmd_train_extractor(&cfg).map(|_| ()),
        Command::Evaluate => experiment::cmd_evaluate(&cfg).map(|_| ()),
        Command::Report => commin_harness::report::cmd_report(&cfg).map(|_| ()),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
