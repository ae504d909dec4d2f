//! `dvnc` command line. Results go to stdout as JSON, logs to stderr.

use super::checkpoint::Checkpoint;
use super::config::{TaskSpec, TrainConfig};
use super::train::{evaluate_checkpoint, train};
use super::{HarnessError, EXIT_USAGE};
use crate::bounds::{bound_comparison, concentration_check, BoundParams, ConcentrationSpec};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "dvnc", version, about = "Train and evaluate modular recurrent networks with discretized communication")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a task.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Task spec as inline JSON or a path to a JSON file.
        #[arg(long)]
        task: String,
    },
    /// Compare the generalization bounds with and without discretization.
    Bounds {
        /// Inline JSON or a path.
        #[arg(long)]
        params: String,
    },
    /// Empirical check of the codebook concentration inequality.
    Concentration {
        /// Inline JSON or a path.
        #[arg(long)]
        spec: String,
    },
}

fn json_arg<T: DeserializeOwned>(arg: &str, what: &str) -> Result<T, HarnessError> {
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        std::fs::read_to_string(arg).map_err(HarnessError::io(format!("reading {what} {arg}")))?
    };
    serde_json::from_str(&text).map_err(HarnessError::json(what.to_string()))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    output_dir: &'a std::path::Path,
    steps: usize,
    final_task_loss: Option<f64>,
    evals: &'a [super::EvalRecord],
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), HarnessError> {
    let value = match cli.command {
        Command::Train { config, seed, out: dir } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = dir {
                cfg.output_dir = d;
            }
            let _ = writeln!(err, "training {} steps into {}", cfg.total_steps(), cfg.output_dir.display());
            let outcome = train(&cfg)?;
            let _ = writeln!(err, "wrote {}", outcome.checkpoint_path.display());
            serde_json::to_value(TrainSummary {
                output_dir: &cfg.output_dir,
                steps: outcome.task_losses.len(),
                final_task_loss: outcome.task_losses.last().copied(),
                evals: &outcome.evals,
            })
        }
        Command::Eval { ckpt, task } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let task: TaskSpec = json_arg(&task, "task spec")?;
            serde_json::to_value(evaluate_checkpoint(&ckpt, &task, "cli")?)
        }
        Command::Bounds { params } => {
            let params: BoundParams = json_arg(&params, "bound parameters")?;
            serde_json::to_value(bound_comparison(&params)?)
        }
        Command::Concentration { spec } => {
            let spec: ConcentrationSpec = json_arg(&spec, "concentration spec")?;
            serde_json::to_value(concentration_check(&spec, &spec.distribution)?)
        }
    }
    .map_err(HarnessError::json("output"))?;
    let text = serde_json::to_string_pretty(&value).map_err(HarnessError::json("output"))?;
    writeln!(out, "{text}").map_err(HarnessError::io("writing stdout"))
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
