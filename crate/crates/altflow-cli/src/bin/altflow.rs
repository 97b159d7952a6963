use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use altflow_cli::commands;
use altflow_cli::config::Overrides;
use altflow_cli::exit_code_for;

#[derive(Parser)]
#[command(name = "altflow", version, about = "Normalizing-flow anomaly detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonFlags {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Override the training seed and collapse the seed list to just it.
    #[arg(long)]
    seed: Option<u64>,

    /// Disable the alternating base-update schedule (frozen standard base).
    #[arg(long)]
    no_altub: bool,

    /// Update the base jointly with the flow every epoch, no alternation.
    #[arg(long)]
    stereotype: bool,

    /// Override how many epochs separate base-only epochs.
    #[arg(long)]
    freezing_interval: Option<usize>,

    /// Override the peak base-only learning rate.
    #[arg(long)]
    eta2_max: Option<f64>,

    /// Override the number of coupling blocks.
    #[arg(long)]
    depth: Option<usize>,

    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            no_altub: self.no_altub,
            stereotype: self.stereotype,
            freezing_interval: self.freezing_interval,
            eta2_max: self.eta2_max,
            depth: self.depth,
            out: self.out.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, reports, and checkpoints.
    Train {
        #[command(flatten)]
        common: CommonFlags,
    },

    /// Score the test split with a checkpoint or the synthetic oracle.
    Eval {
        #[command(flatten)]
        common: CommonFlags,

        /// Checkpoint to score with.
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        /// Score with the generative model that produced the synthetic data.
        #[arg(long)]
        oracle: bool,

        /// metrics.csv from a training run, for a windowed stability summary.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },

    /// Channel-normality diagnostics of a checkpoint on the train split.
    Diagnose {
        #[command(flatten)]
        common: CommonFlags,

        /// Checkpoint to diagnose.
        #[arg(long)]
        checkpoint: PathBuf,
    },

    /// Train across coupling depths and summarize loss/normality/detection.
    SweepDepth {
        #[command(flatten)]
        common: CommonFlags,

        /// Depths to sweep, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
    },

    /// Frozen-base baseline vs alternating schedule across seeds.
    Compare {
        #[command(flatten)]
        common: CommonFlags,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common } => commands::cmd_train(&common.config, &common.overrides()),
        Command::Eval {
            common,
            checkpoint,
            oracle,
            metrics,
        } => commands::cmd_eval(
            &common.config,
            &common.overrides(),
            checkpoint.as_deref(),
            *oracle,
            metrics.as_deref(),
        ),
        Command::Diagnose { common, checkpoint } => {
            commands::cmd_diagnose(&common.config, &common.overrides(), checkpoint)
        }
        Command::SweepDepth { common, depths } => {
            commands::cmd_sweep_depth(&common.config, &common.overrides(), depths)
        }
        Command::Compare { common } => commands::cmd_compare(&common.config, &common.overrides()),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        process::exit(exit_code_for(&err));
    }
}
