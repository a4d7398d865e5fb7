use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use apd_core::harness::{checkpoint, config::ExperimentConfig, runner};
use apd_core::{metrics, taskgen, TaskId};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apd", version, about = "Continual learning with additive parameter decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the (variant x order x seed) grid described by a TOML config.
    Run { config: PathBuf },
    /// Test accuracy of one task of a checkpoint on a CSV file (label first).
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        data: PathBuf,
    },
    /// Remove a task's private parameters and write a new checkpoint.
    Forget {
        checkpoint: PathBuf,
        #[arg(long)]
        task: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-variant aggregates of a results directory.
    Metrics { results_dir: PathBuf },
    /// Project task trajectories of one or more run logs onto a joint 2-D PCA basis.
    Pca {
        #[arg(required = true)]
        run_log: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Task whose trajectory is projected; defaults to each run's first task.
        #[arg(long)]
        task: Option<u32>,
    },
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let threads = runner::thread_cap()?;
            let summary = runner::run(&cfg, threads)?;
            println!(
                "{} runs over {} tasks written to {}",
                summary.variants.iter().map(|v| v.runs).sum::<usize>(),
                summary.tasks,
                cfg.output_dir.display()
            );
        }
        Command::Eval {
            checkpoint: path,
            task,
            data,
        } => {
            let state = checkpoint::load(&path)?;
            let id = TaskId(task);
            if !state.has_task(id) {
                bail!("checkpoint {} has no task {task}", path.display());
            }
            let ds = taskgen::load_task_csv(&data, id)?;
            let acc = metrics::evaluate(&state, id, &ds.all()?)?;
            println!("{acc:.6}");
        }
        Command::Forget {
            checkpoint: path,
            task,
            out,
        } => {
            let mut state = checkpoint::load(&path)?;
            metrics::forget_task(&mut state, TaskId(task))?;
            checkpoint::save(&state, &out)?;
        }
        Command::Metrics { results_dir } => {
            print!("{}", runner::metrics_report(&results_dir)?);
        }
        Command::Pca { run_log, out, task } => {
            let lengths = runner::export_pca(&run_log, task, &out)?;
            for (log, len) in run_log.iter().zip(lengths) {
                println!("{}\tpath_length={len:.6}", log.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
