use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hvr_cli::config::{ExperimentConfig, MethodName};
use hvr_cli::{compare, run_config, threads_from_env};

#[derive(Parser)]
#[command(name = "hvr", version, about = "Variance-reduced estimation of homogenized coefficients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory, overriding the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-entry variance ratios of two reports (baseline first).
    Compare {
        baseline: PathBuf,
        reduced: PathBuf,
        /// Also write the comparison JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in oracle suite.
    Oracle {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(config: ExperimentConfig, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let threads = threads_from_env()?;
    let result = run_config(&config, threads)?;
    let dir = out.unwrap_or_else(|| result.experiment.output.clone());
    result.write(&dir)?;
    if let hvr_cli::run::Outcome::Oracle { checks } = &result.outcome {
        for c in checks {
            println!("{}", c.line());
        }
    }
    println!("{}", result.summary());
    Ok(result.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { config, out } => ExperimentConfig::from_path(&config)
            .map_err(anyhow::Error::from)
            .and_then(|c| run(c, out)),
        Command::Oracle { out } => {
            let config = ExperimentConfig {
                method: Some(MethodName::Oracle),
                ..Default::default()
            };
            run(config, out)
        }
        Command::Compare { baseline, reduced, out } => compare(&baseline, &reduced).and_then(|c| {
            let text = serde_json::to_string_pretty(&c)? + "\n";
            if let Some(path) = out {
                std::fs::write(&path, &text)?;
            }
            print!("{text}");
            if let Some(w) = &c.warning {
                eprintln!("warning: {w}");
            }
            Ok(true)
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
