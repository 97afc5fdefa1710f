//! Command-line front end: dataset generation, training, inference,
//! matching and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fruitmon", version, about = "Fruit segmentation and re-identification on colored point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset of scene pairs.
    Gen(GenArgs),
    /// Train the segmentation network.
    TrainSeg(TrainSegArgs),
    /// Train the fruit encoder and matcher jointly.
    TrainMatch(TrainMatchArgs),
    /// Segment fruit instances in a cloud.
    Segment(SegmentArgs),
    /// Associate the fruits of two sessions.
    Match(MatchArgs),
    /// Evaluate segmentation and matching against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of scene pairs (default 1).
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Dataset used for model selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Line-delimited JSON training log (default: `<out>.log.jsonl`).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Bandwidths to try on the validation data, as `start:stop:step`.
    #[arg(long)]
    pub bandwidth_grid: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainMatchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Matcher checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder checkpoint.
    #[arg(long)]
    pub out_encoder: PathBuf,
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// Segmentation checkpoint; optional with `--oracle-offsets`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Mean-shift bandwidth; defaults to the checkpoint's value.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Cluster ground-truth offsets stored in the input instead of predictions.
    #[arg(long)]
    pub oracle_offsets: bool,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long)]
    pub enc: Option<PathBuf>,
    #[arg(long)]
    pub matcher: Option<PathBuf>,
    /// Segmented cloud at time t.
    #[arg(long)]
    pub t: PathBuf,
    /// Segmented cloud at time t-1.
    #[arg(long)]
    pub prev: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use a non-learned method instead of the matcher.
    #[arg(long, value_parser = ["nn"])]
    pub baseline: Option<String>,
    /// Distance threshold of the nearest-neighbour baseline (meters).
    #[arg(long, default_value_t = 0.033)]
    pub epsilon: f64,
    /// Also write the probability matrix as JSON.
    #[arg(long)]
    pub probs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted instances at t and t-1.
    #[arg(long, num_args = 2, value_names = ["T", "PREV"])]
    pub pred: Vec<PathBuf>,
    /// Ground-truth instances at t and t-1.
    #[arg(long, num_args = 2, value_names = ["T", "PREV"])]
    pub gt: Vec<PathBuf>,
    /// Ground-truth association between the ground-truth instances.
    #[arg(long)]
    pub assoc_gt: PathBuf,
    /// Predicted association between the predicted instances.
    #[arg(long)]
    pub pred_assoc: PathBuf,
    #[arg(long, default_value = "0.05:0.30:0.05")]
    pub iou_grid: String,
    /// IoU threshold of the panoptic report.
    #[arg(long, default_value_t = 0.5)]
    pub pq_iou: f64,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::TrainSeg(a) => commands::train_seg(a),
        Command::TrainMatch(a) => commands::train_match(a),
        Command::Segment(a) => commands::segment(a),
        Command::Match(a) => commands::match_clouds(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
