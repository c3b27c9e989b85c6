//! Pipeline driver: one subcommand per stage, plus `run-all`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream
//! artifact, 4 provider failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use prefax::pipeline::{load_config, run_all, run_stage, Stage, StageSummary};
use prefax::Error;

#[derive(Parser)]
#[command(
    name = "prefax",
    about = "Axiomatic preference-pair construction, margin-loss training, and ranking evaluation"
)]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, default_value = "prefax.toml")]
    config: PathBuf,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fixture-only mode: never call a network provider.
    #[arg(long, global = true)]
    offline: bool,

    /// Rerun the stage even when its manifest is still fresh.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, filter, and subsample the post archive.
    Ingest,
    /// Embed questions and build the passage pool.
    Index,
    /// Mine related questions and split evidence.
    #[command(name = "mine-related")]
    MineRelated,
    /// Construct preference pairs under the enabled axioms.
    #[command(name = "gen-axioms")]
    GenAxioms,
    /// Fill per-pair margins.
    Margins,
    /// Gate pair types against human-preference judgments.
    Validate,
    /// Train the scorer on the margin objective.
    Train,
    /// Compute ranking and pairwise metrics.
    Eval,
    /// Render the text and JSON reports.
    Report,
    /// Run every stage in order.
    #[command(name = "run-all")]
    RunAll,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match load_config(&cli.config, cli.seed, cli.offline) {
        Ok(config) => config,
        Err(err) => {
            eprintln!("error: {err}");
            return exit_code(&err);
        }
    };

    let stage = match cli.command {
        Command::Ingest => Some(Stage::Ingest),
        Command::Index => Some(Stage::Index),
        Command::MineRelated => Some(Stage::MineRelated),
        Command::GenAxioms => Some(Stage::GenAxioms),
        Command::Margins => Some(Stage::Margins),
        Command::Validate => Some(Stage::Validate),
        Command::Train => Some(Stage::Train),
        Command::Eval => Some(Stage::Eval),
        Command::Report => Some(Stage::Report),
        Command::RunAll => None,
    };

    let outcome = match stage {
        Some(stage) => run_stage(stage, &config, cli.force).map(|s| vec![s]),
        None => run_all(&config, cli.force),
    };

    match outcome {
        Ok(summaries) => {
            for summary in &summaries {
                print_summary(summary);
            }
            if summaries.iter().any(|s| s.stage == "report") {
                if let Ok(text) = std::fs::read_to_string(config.artifact("report.txt")) {
                    println!("\n{text}");
                }
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn print_summary(summary: &StageSummary) {
    let counts: Vec<String> = summary
        .counts
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    println!(
        "{:<13} {} {}",
        summary.stage,
        if summary.cached { "(cached)" } else { "ok" },
        counts.join(" ")
    );
    for note in &summary.notes {
        println!("  note: {note}");
    }
}

fn exit_code(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) | Error::Template { .. } => ExitCode::from(2),
        Error::Upstream { .. } => ExitCode::from(3),
        Error::Transport { .. } | Error::FixtureMiss { .. } => ExitCode::from(4),
        _ => ExitCode::FAILURE,
    }
}
