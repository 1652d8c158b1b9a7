use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use respagent_core::experiment::{run_config_file, ExperimentKind, RunConfig};
use respagent_core::Error;

#[derive(Parser, Debug)]
#[command(name = "respagent", version, about = "Desk-scale respiratory-sound agent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// JSON run config; its `experiment` field must match the subcommand.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and every derived sub-seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: runs/<subcommand>].
    #[arg(long, env = "RESPAGENT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic long-tail corpus.
    GenData(RunArgs),
    /// Train the woven sparse-attention diagnoser.
    TrainDiagnoser(RunArgs),
    /// Train the unit generator on quantized corpus features.
    TrainGenerator(RunArgs),
    /// Train the flow-matching toy decoder.
    TrainCfm(RunArgs),
    /// Allocate budgets for every configured policy.
    Plan(RunArgs),
    /// Run the closed analyze, synthesize, retrain loop.
    Loop(RunArgs),
    /// Tabulate sparse attention cost against sequence length.
    BenchAttn(RunArgs),
    /// Screen texts with the QA heuristics.
    QaText(RunArgs),
    /// Evaluate a trained or freshly trained diagnoser.
    Eval(RunArgs),
}

impl Command {
    fn split(self) -> (ExperimentKind, RunArgs) {
        match self {
            Command::GenData(a) => (ExperimentKind::GenData, a),
            Command::TrainDiagnoser(a) => (ExperimentKind::TrainDiagnoser, a),
            Command::TrainGenerator(a) => (ExperimentKind::TrainGenerator, a),
            Command::TrainCfm(a) => (ExperimentKind::TrainCfm, a),
            Command::Plan(a) => (ExperimentKind::Plan, a),
            Command::Loop(a) => (ExperimentKind::Loop, a),
            Command::BenchAttn(a) => (ExperimentKind::BenchAttn, a),
            Command::QaText(a) => (ExperimentKind::QaText, a),
            Command::Eval(a) => (ExperimentKind::Eval, a),
        }
    }
}

fn report(err: &Error) -> ExitCode {
    let (kind, path, code) = match err {
        Error::Config { path, .. } => ("config", Some(path.as_str()), 2),
        Error::InvalidArgument(_) => ("invalid_argument", None, 2),
        Error::Io { .. } => ("io", None, 1),
        _ => ("experiment", None, 1),
    };
    let body = serde_json::json!({ "error": kind, "path": path, "message": err.to_string() });
    eprintln!("{body}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (kind, args) = Cli::parse().command.split();
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs").join(kind.name()));
    let declared = match RunConfig::load(&args.config) {
        Ok(cfg) => cfg.experiment,
        Err(e) => return report(&e),
    };
    if declared != kind {
        return report(&Error::Config { path: "experiment".into(), message: format!("config declares `{declared}` but the subcommand is `{kind}`") });
    }
    match run_config_file(&args.config, args.seed, &out) {
        Ok(manifest) => {
            println!("{} {}", manifest.result_digest, out.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}
