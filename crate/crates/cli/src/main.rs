use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "parity-lab", version, about = "Sparse parity learning lab")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory for result files.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Format of tabular output.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fourier coefficients of Majority or Half against enumeration.
    Fourier(commands::FourierArgs),
    /// Population gradient of one sparse neuron against a parity.
    Popgrad(commands::PopgradArgs),
    /// Train one network.
    Train(commands::TrainArgs),
    /// Run a grid sweep from a config file.
    Sweep(commands::SweepArgs),
    /// Prune, rewind and retrain.
    Lottery(commands::LotteryArgs),
    /// Audit the statistical-query frontier on a small cube.
    Sqcheck(commands::SqArgs),
    /// Two-phase construction for over-sparse initialisation.
    TheoryOversparse(commands::OversparseArgs),
    /// One-step construction for under-sparse initialisation.
    TheoryUndersparse(commands::UndersparseArgs),
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let c = &cli.common;
    match cli.command {
        Command::Fourier(a) => commands::fourier(c, a),
        Command::Popgrad(a) => commands::popgrad(c, a),
        Command::Train(a) => commands::train(c, a),
        Command::Sweep(a) => commands::sweep(c, a),
        Command::Lottery(a) => commands::lottery(c, a),
        Command::Sqcheck(a) => commands::sqcheck(c, a),
        Command::TheoryOversparse(a) => commands::theory_oversparse(c, a),
        Command::TheoryUndersparse(a) => commands::theory_undersparse(c, a),
    }
}
