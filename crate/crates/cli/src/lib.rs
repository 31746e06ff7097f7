//! `kdlab` command-line front end: experiment documents, single runs,
//! sweeps, sizing tables and reports.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use kdlab::Error;

pub use config::{Command, ConfigErrors, Experiment, ExperimentConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "kdlab",
    version,
    about = "Knowledge-distillation experiments on small transformers"
)]
pub struct Cli {
    /// Experiment document (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the document's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiments run concurrently by `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory; overrides the document's `out`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Subcmd,
}

#[derive(Debug, Subcommand)]
pub enum Subcmd {
    /// Train a teacher on the task and save `teacher.ckpt`.
    TrainTeacher,
    /// Build a student with the configured init scheme and save it.
    InitStudent,
    /// Distill one student.
    Distill,
    /// Distill one student per point of the `[sweep]` axes.
    Sweep,
    /// Widest width per depth at the `[size]` budget.
    Size,
    /// Aggregate summary CSVs over seeds.
    Report {
        /// Summary files; defaults to `<out>/summary.csv`.
        inputs: Vec<PathBuf>,
    },
}

/// Process exit code for a failed run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<ConfigErrors>() {
            return EXIT_CONFIG;
        }
        match cause.downcast_ref::<Error>() {
            Some(Error::Config(_)) => return EXIT_CONFIG,
            Some(Error::Divergence { .. }) => return EXIT_DIVERGED,
            _ => {}
        }
    }
    EXIT_FAILURE
}

fn load(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => config::read_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.jobs == 0 {
        return Err(ConfigErrors(vec!["--jobs must be at least 1".into()]).into());
    }
    let config = load(cli)?;
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let prepare = |command| Experiment::prepare(config.clone(), command);
    match &cli.command {
        Subcmd::TrainTeacher => {
            let exp = prepare(Command::TrainTeacher)?;
            commands::echo_config(&exp.config, &out)?;
            let t = commands::train_teacher(&exp, &out)?;
            println!(
                "teacher dev metric {:.4} -> {}",
                t.dev_metric,
                out.join(commands::TEACHER_FILE).display()
            );
        }
        Subcmd::InitStudent => {
            let exp = prepare(Command::InitStudent)?;
            let path = commands::init_student_command(&exp, &out)?;
            println!("{} student -> {}", exp.config.student.init.scheme, path.display());
        }
        Subcmd::Distill => {
            let exp = prepare(Command::Distill)?;
            let r = commands::run_cells(&exp, Command::Distill, &out, 1)?;
            println!(
                "student dev metric {:.4} (loss {:.4} -> {:.4})",
                r[0].dev_metric, r[0].start_loss, r[0].end_loss
            );
        }
        Subcmd::Sweep => {
            let exp = prepare(Command::Sweep)?;
            let r = commands::run_cells(&exp, Command::Sweep, &out, cli.jobs)?;
            println!("{} cells -> {}", r.len(), out.join(commands::SUMMARY_FILE).display());
        }
        Subcmd::Size => {
            for r in commands::size_command(&config, &out)? {
                println!(
                    "L={:<3} d={:<4} heads={:<3} params={:<10} embedding={:>5.1}%  flops={:.3e}",
                    r.config.num_layers,
                    r.config.hidden_dim,
                    r.config.num_heads,
                    r.params,
                    100.0 * r.embedding_fraction,
                    r.flops
                );
            }
        }
        Subcmd::Report { inputs } => {
            let inputs = if inputs.is_empty() {
                vec![out.join(commands::SUMMARY_FILE)]
            } else {
                inputs.clone()
            };
            for r in commands::report_command(&inputs, Some(&out))? {
                let key: Vec<String> = r
                    .key
                    .iter()
                    .filter(|(_, v)| !v.is_empty())
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                println!("{:<60} n={} mean={:.4} std={:.4}", key.join(" "), r.runs, r.mean, r.std);
            }
        }
    }
    Ok(())
}
