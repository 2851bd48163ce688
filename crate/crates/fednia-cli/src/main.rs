//! Command-line front end for the `fednia` federated-learning simulator.
//!
//! Subcommands: `run` (one experiment), `sweep` (one experiment per axis
//! value), `analyze` (cross-method ranking from report files),
//! `poison-audit` (dataset diff for an attack spec), and `validate`
//! (config checking). Exit codes group failures by class: 2 for
//! configuration/usage problems, 3 for file I/O and format problems, 4 for
//! numerical/runtime failures.

mod analyze;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "fednia", version, about = "Federated-learning simulator with an activation-analysis defense")]
struct Cli {
    /// Override the config file's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel client training (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Where run artifacts go (run: the run directory itself; sweep: the
    /// parent of the per-value directories; analyze: output directory).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    /// Validate and print what would run, without running anything.
    #[arg(long, global = true)]
    dry_run: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepAxis {
    /// Malicious fraction; rewrites client counts at fixed total.
    Delta,
    /// Defense threshold multiplier λ.
    Lambda,
    /// Aggregation rule.
    Aggregator,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment described by a config file.
    Run {
        config: PathBuf,
        /// Write raw activation profiles for every defended round.
        #[arg(long)]
        dump_profiles: bool,
        /// Suppress per-round progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Run one experiment per value of a swept axis, then aggregate reports.
    Sweep {
        config: PathBuf,
        /// Axis to sweep.
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Axis values: comma-separated and/or repeated flags. delta/lambda
        /// take numbers; aggregator takes kinds (`fed-avg`,
        /// `coordinate-median`, ...) or inline tables like
        /// `{ kind = "trimmed-mean", trim_fraction = 0.1 }` (commas inside
        /// braces are preserved).
        #[arg(long, required = true)]
        values: Vec<String>,
        /// Suppress per-round progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Rank methods across report files: Friedman statistic, Nemenyi
    /// critical difference, and indistinguishable groups.
    Analyze {
        /// One or more report.csv files produced by run/sweep.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Significance level (only 0.05 is tabulated).
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Apply an attack spec to an IDX dataset and print a JSON diff summary.
    PoisonAudit {
        /// IDX images file.
        #[arg(long)]
        images: PathBuf,
        /// IDX labels file.
        #[arg(long)]
        labels: PathBuf,
        /// TOML file holding one attack spec table.
        #[arg(long)]
        attack: PathBuf,
        /// Also write the poisoned images to this IDX file.
        #[arg(long, requires = "save_labels")]
        save_images: Option<PathBuf>,
        /// Also write the poisoned labels to this IDX file.
        #[arg(long, requires = "save_images")]
        save_labels: Option<PathBuf>,
    },
    /// Parse and validate a config file, printing the resolved form.
    Validate { config: PathBuf },
}

/// Exit code for an error, grouped by class.
fn exit_code(err: &fednia::Error) -> u8 {
    use fednia::Error;
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Analysis(_) => 2,
        Error::Parse { .. }
        | Error::Io { .. }
        | Error::IdxFormat { .. }
        | Error::Checkpoint { .. } => 3,
        Error::Shape(_) | Error::Diverged { .. } => 4,
        Error::Client { source, .. } => exit_code(source),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }

    let result = match cli.command {
        Command::Run {
            ref config,
            dump_profiles,
            quiet,
        } => commands::run(
            config,
            cli.seed,
            cli.output_dir.as_deref(),
            cli.dry_run,
            dump_profiles,
            quiet,
        ),
        Command::Sweep {
            ref config,
            axis,
            ref values,
            quiet,
        } => commands::sweep(
            config,
            axis,
            values,
            cli.seed,
            cli.output_dir.as_deref(),
            cli.dry_run,
            quiet,
        ),
        Command::Analyze { ref reports, alpha } => {
            analyze::analyze(reports, alpha, cli.output_dir.as_deref())
        }
        Command::PoisonAudit {
            ref images,
            ref labels,
            ref attack,
            ref save_images,
            ref save_labels,
        } => commands::poison_audit(
            images,
            labels,
            attack,
            save_images.as_deref(),
            save_labels.as_deref(),
        ),
        Command::Validate { ref config } => commands::validate(config, cli.seed),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Every error variant already folds its source into its Display,
            // so one line carries the whole chain.
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
