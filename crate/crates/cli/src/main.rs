//! `rank1`: training, evaluation and numeric diagnostics for rank-1 Bayesian networks.

mod diagnostics;
mod output;
mod overrides;
mod training;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use overrides::Overrides;

#[derive(Parser, Debug)]
#[command(name = "rank1", version, about = "Rank-1 Bayesian neural network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and stream held-out metrics as JSON lines.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one or more sample counts.
    Eval(EvalArgs),
    /// Evaluate a checkpoint on every corruption type and intensity.
    CorruptEval(CorruptEvalArgs),
    /// Finite-difference check of the training objective's gradients.
    Gradcheck(GradcheckArgs),
    /// Closed-form KL divergences against Monte Carlo estimates.
    KlCheck(KlCheckArgs),
    /// Compare full-rank and rank-1 perturbation variances on random networks.
    VerifyTheorem(TheoremArgs),
    /// Sample induced weight marginals `w·r·s` to CSV.
    InducedPrior(InducedArgs),
}

#[derive(Args, Debug)]
struct Output {
    /// Write records here instead of stdout.
    #[arg(long)]
    log_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for checkpoints.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[command(flatten)]
    output: Output,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated draws per component; defaults to the checkpoint's config.
    #[arg(long, value_delimiter = ',')]
    eval_samples: Vec<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: training::Split,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct CorruptEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Draws per component; defaults to the checkpoint's config.
    #[arg(long)]
    eval_samples: Option<usize>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random models per distribution family.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Root seed; falls back to RANK1_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct KlCheckArgs {
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct TheoremArgs {
    #[arg(long, default_value_t = 3)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    data_points: usize,
    #[arg(long, default_value = "tanh")]
    activation: String,
    #[arg(long, default_value_t = 2.0)]
    c_sigma: f64,
    /// Multiplies the full-rank covariance (negative control when not 1).
    #[arg(long, default_value_t = 1.0)]
    lhs_scale: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

#[derive(Args, Debug)]
pub struct InducedArgs {
    /// Factor families to sample.
    #[arg(long, value_delimiter = ',', default_value = "normal,cauchy")]
    family: Vec<String>,
    #[arg(long, default_value_t = 100_000)]
    draws: usize,
    /// Factor location.
    #[arg(long, default_value_t = 1.0)]
    loc: f64,
    /// Factor scale.
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    /// Only the output factor `r` is stochastic; `s` stays at one.
    #[arg(long)]
    r_only: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: Output,
}

/// Explicit flag, else `RANK1_SEED`, else 0.
pub fn resolve_seed(flag: Option<u64>) -> anyhow::Result<u64> {
    match flag {
        Some(s) => Ok(s),
        None => Ok(overrides::env_seed()?.unwrap_or(0)),
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(a) => training::train(a),
        Command::Eval(a) => training::eval(a),
        Command::CorruptEval(a) => training::corrupt_eval(a),
        Command::Gradcheck(a) => diagnostics::gradcheck(a),
        Command::KlCheck(a) => diagnostics::kl_check(a),
        Command::VerifyTheorem(a) => diagnostics::verify_theorem(a),
        Command::InducedPrior(a) => diagnostics::induced_prior(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
