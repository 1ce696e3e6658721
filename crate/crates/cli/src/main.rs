//! `skillblend` command-line tool.

mod commands;
mod svg;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "skillblend", version, about = "Learn to sequence and blend skills from demonstrations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Script a teacher demonstration on a scene and annotate it with skill outputs.
    GenDemo(GenDemoArgs),
    /// Fit a weight model to one or more demonstrations.
    Train(TrainArgs),
    /// Roll out a trained model on a scene.
    Rollout(RolloutArgs),
    /// Score a trajectory against its scene.
    Eval(EvalArgs),
    /// Export weight curves and end-effector paths as CSV and SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Diag,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Projected,
    Unprojected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum QpPathArg {
    Optnet,
    Closed,
}

#[derive(clap::Args, Debug)]
pub struct GenDemoArgs {
    #[arg(long)]
    pub scene: std::path::PathBuf,
    /// Demonstration document to write.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// Also write the raw teacher trajectory as CSV.
    #[arg(long)]
    pub traj: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(clap::Args, Debug)]
pub struct TrainArgs {
    #[arg(long = "demo", required = true)]
    pub demos: Vec<std::path::PathBuf>,
    #[arg(long, value_enum, default_value = "diag")]
    pub variant: VariantArg,
    /// Trained diagonal model to warm-start a full model from.
    #[arg(long)]
    pub init: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, value_enum, default_value = "projected")]
    pub loss: LossArg,
    #[arg(long = "qp-path", value_enum, default_value = "optnet")]
    pub qp_path: QpPathArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Model document to write; the history goes next to it.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct RolloutArgs {
    #[arg(long)]
    pub scene: std::path::PathBuf,
    #[arg(long)]
    pub model: std::path::PathBuf,
    /// Move the anchored skills to the scene's n-th transfer target first.
    #[arg(long)]
    pub transfer: Option<usize>,
    /// Trajectory CSV to write.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(clap::Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub scene: std::path::PathBuf,
    #[arg(long)]
    pub traj: std::path::PathBuf,
    /// Evaluate against the scene's n-th transfer target.
    #[arg(long)]
    pub transfer: Option<usize>,
    /// Report JSON to write; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(clap::Args, Debug)]
pub struct PlotArgs {
    #[arg(long)]
    pub model: Option<std::path::PathBuf>,
    #[arg(long)]
    pub traj: Option<std::path::PathBuf>,
    /// Marks pick and place positions on the path plot.
    #[arg(long)]
    pub scene: Option<std::path::PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: std::path::PathBuf,
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("QPBLEND_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::input(format!("QPBLEND_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::input(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::GenDemo(a) => commands::gen_demo(a),
        Command::Train(a) => commands::train(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plot(a) => commands::plot(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
