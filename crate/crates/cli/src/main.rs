use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod ablate;
mod common;
mod config;
mod data;
mod error;
mod manifest;
mod retrieve;
mod train;

use config::{merge, Globals};
use error::{CliError, CliResult};

/// Teacher-student distillation experiments for dual-encoder retrieval.
#[derive(Parser)]
#[command(name = "cona", version)]
struct Cli {
    /// JSON object of flag values (snake_case keys); command-line flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Require an explicit --seed.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print NDJSON instead of human-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData(data::GenDataArgs),
    /// Pre-train the teacher pair with the symmetric InfoNCE objective.
    TrainTeacher(train::TeacherArgs),
    /// Distill students from frozen teachers.
    Distill(train::DistillArgs),
    /// Baseline plus each grid cell added singly, over several seeds.
    Ablate(ablate::AblateArgs),
    /// Recall@k in both retrieval directions.
    Eval(retrieve::EvalArgs),
    /// Encode one modality of a dataset into a persisted index.
    Index(retrieve::IndexArgs),
    /// Top-k search of an index with one raw input vector.
    Query(retrieve::QueryArgs),
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("CONA_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::flag(format!("CONA_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::flag(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    let mut g = Globals { deterministic: cli.deterministic, json: cli.json };
    let cfg = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => {
            let a = merge(a, cfg, &mut g)?;
            data::run(a, &g)
        }
        Command::TrainTeacher(a) => {
            let a = merge(a, cfg, &mut g)?;
            train::run_teacher(a, &g)
        }
        Command::Distill(a) => {
            let a = merge(a, cfg, &mut g)?;
            train::run_distill(a, &g)
        }
        Command::Ablate(a) => {
            let a = merge(a, cfg, &mut g)?;
            ablate::run(a, &g)
        }
        Command::Eval(a) => {
            let a = merge(a, cfg, &mut g)?;
            retrieve::run_eval(a, &g)
        }
        Command::Index(a) => {
            let a = merge(a, cfg, &mut g)?;
            retrieve::run_index(a, &g)
        }
        Command::Query(a) => {
            let a = merge(a, cfg, &mut g)?;
            retrieve::run_query(a, &g)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return;
        }
        Err(e) => {
            let text = e.to_string();
            let message = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect::<Vec<_>>()
                .join(" ");
            let message = message.strip_prefix("error: ").unwrap_or(&message);
            eprintln!("{}", CliError::flag(message).to_json());
            std::process::exit(2);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("{}", e.to_json());
        std::process::exit(e.kind.exit_code());
    }
}
