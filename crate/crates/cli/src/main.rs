use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trl_cli::{StageSelection, TrainOptions};
use trl_core::config::Protocol;

#[derive(Parser)]
#[command(name = "trl", version, about = "Two-stream video re-identification: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (flat `section.key = value` file).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `run.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Fixed,
    Half10,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset into `data.root`.
    Gen(Common),
    /// Train one or both stages, resuming from checkpoints in the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Split of the evaluation protocol whose training identities are used.
        #[arg(long, default_value_t = 0)]
        trial: usize,
        /// Stop after this many iterations (both stages counted) have completed.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score checkpoints; the i-th checkpoint is evaluated on split i.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, value_enum)]
        protocol: Option<ProtocolArg>,
        /// Test on this dataset instead of `data.root`.
        #[arg(long)]
        cross: Option<PathBuf>,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck(Common),
    /// Transform parameters and warped maps for one sequence.
    Alignviz {
        #[command(flatten)]
        common: Common,
        /// Defaults to an untrained model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence path relative to the dataset root, e.g. `id0000/cam1/seq00`.
        #[arg(long)]
        sequence: String,
    },
}

fn config(common: &Common, protocol: Option<ProtocolArg>) -> anyhow::Result<trl_core::config::RunConfig> {
    let overrides = trl_cli::Overrides {
        seed: common.seed,
        out_dir: common.out.clone(),
        protocol: protocol.map(|p| match p {
            ProtocolArg::Fixed => Protocol::Fixed,
            ProtocolArg::Half10 => Protocol::HalfSplit10,
        }),
    };
    trl_cli::load_config(&common.config, &overrides)
}

fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Gen(common) => trl_cli::cmd_gen(&config(&common, None)?),
        Command::Train {
            common,
            stage,
            trial,
            stop_after,
        } => {
            let opts = TrainOptions {
                stages: match stage {
                    StageArg::One => StageSelection::One,
                    StageArg::Two => StageSelection::Two,
                    StageArg::All => StageSelection::All,
                },
                trial,
                stop_after,
            };
            Ok(trl_cli::cmd_train(&config(&common, None)?, &opts)?.report)
        }
        Command::Eval {
            common,
            checkpoint,
            protocol,
            cross,
        } => Ok(trl_cli::cmd_eval(&config(&common, protocol)?, &checkpoint, cross.as_deref())?.1),
        Command::Gradcheck(common) => trl_cli::cmd_gradcheck(&config(&common, None)?),
        Command::Alignviz {
            common,
            checkpoint,
            sequence,
        } => Ok(trl_cli::cmd_alignviz(&config(&common, None)?, checkpoint.as_deref(), &sequence)?.text),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
