mod analyze;
mod attack;
mod convert;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

/// Federated training with partial-network updates on simulated clients.
#[derive(Parser, Debug)]
#[command(name = "fedpart", version)]
struct Cli {
    /// Master seed; overrides the config's `seed` for `run`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for client training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment from a JSON config.
    Run { config: PathBuf },
    /// Post-hoc analyses on checkpoints and logs.
    #[command(subcommand)]
    Analyze(analyze::AnalyzeCommand),
    /// Gradient-inversion attack on one sample.
    Attack(attack::AttackArgs),
    /// Convert a CSV file with a `label` column into the binary dataset format.
    Convert(convert::ConvertArgs),
}

/// Global flags shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Globals {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// A failed command, split by exit status.
#[derive(Debug)]
pub enum Failure {
    /// Invalid configuration or arguments (exit 2).
    Config(Vec<String>),
    /// Failure after validation (exit 3).
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Failure::Config(vec![msg.into()])
    }
}

impl From<fedpart::Error> for Failure {
    fn from(e: fedpart::Error) -> Self {
        match e {
            fedpart::Error::InvalidConfig(errs) => Failure::Config(errs),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<fedpart::Error>() {
            Ok(inner) => inner.into(),
            Err(e) => Failure::Runtime(e),
        }
    }
}

pub type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let globals = Globals {
        seed: cli.seed,
        out: cli.out,
        threads: cli.threads,
    };
    if let Some(n) = globals.threads {
        if n == 0 {
            return report(Failure::config("--threads must be >= 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(Failure::Runtime(e.into()));
        }
    }
    let result = match cli.command {
        Command::Run { config } => run::cmd_run(&config, &globals),
        Command::Analyze(cmd) => analyze::cmd_analyze(cmd, &globals),
        Command::Attack(args) => attack::cmd_attack(args, &globals),
        Command::Convert(args) => convert::cmd_convert(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let (code, body) = match f {
        Failure::Config(errors) => (2, json!({ "status": "config_error", "errors": errors })),
        Failure::Runtime(e) => (
            3,
            json!({ "status": "runtime_error", "errors": e.chain().map(|c| c.to_string()).collect::<Vec<_>>() }),
        ),
    };
    eprintln!("{body}");
    ExitCode::from(code)
}

/// Pretty JSON to stdout and, when `dir` is set, to `dir/name`.
pub fn emit_json(value: &serde_json::Value, dir: Option<&PathBuf>, name: &str) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(name), format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(())
}
