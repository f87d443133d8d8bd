use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use crate::commands::{self, InterpolateArgs, MergeArgs, RunArgs};
use crate::error::CliError;
use cmm_core::harness::{InterpMode, MergeMethod};
use cmm_core::Scenario;

#[derive(Parser)]
#[command(name = "cmm", version, about = "Continual model merging lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the continual loop from a config file and write a results JSON.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Save the final model here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Save fine-tuned and merged models after every task.
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Merge checkpoint `a` (current, weight lambda) into `b`.
    Merge {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "fisher")]
        method: MergeMethod,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep between two checkpoints and write `alpha,avg_accuracy,avg_loss`.
    Interpolate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cil")]
        scenario: Scenario,
        #[arg(long, default_value = "task")]
        task_column: String,
        #[arg(long, default_value = "linear")]
        mode: InterpMode,
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-task accuracy and loss of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cil")]
        scenario: Scenario,
        #[arg(long, default_value = "task")]
        task_column: String,
    },
    /// Generate the synthetic dataset described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export embeddings of every sample for external plotting.
    DumpEmbeddings {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "cil")]
        scenario: Scenario,
        #[arg(long, default_value = "task")]
        task_column: String,
        #[arg(long, default_value = "model")]
        tag: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Run {
            config,
            out,
            checkpoint,
            checkpoint_dir,
        } => {
            let doc = commands::run(&RunArgs {
                config,
                out,
                checkpoint,
                checkpoint_dir,
            })?;
            eprintln!("final average accuracy {:.4}", doc.a.last().copied().unwrap_or(0.0));
        }
        Command::Merge {
            a,
            b,
            method,
            lambda,
            seed,
            out,
        } => {
            commands::merge(&MergeArgs {
                a,
                b,
                method,
                lambda,
                seed,
                out,
            })?;
        }
        Command::Interpolate {
            a,
            b,
            data,
            scenario,
            task_column,
            mode,
            grid,
            out,
        } => commands::interpolate_cmd(&InterpolateArgs {
            a,
            b,
            data,
            scenario,
            task_column,
            mode,
            grid,
            out,
        })?,
        Command::Eval {
            ckpt,
            data,
            scenario,
            task_column,
        } => {
            let report = commands::eval(&ckpt, &data, scenario, &task_column)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenData { config, out } => commands::gen_data(&config, &out)?,
        Command::DumpEmbeddings {
            ckpt,
            data,
            scenario,
            task_column,
            tag,
            out,
        } => {
            commands::dump_embeddings(&ckpt, &data, scenario, &task_column, &tag, &out)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Diagnostics go to stderr.
pub fn run<I, A>(args: I) -> u8
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}
