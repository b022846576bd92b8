mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddpo_core::Mode;

use crate::config::{ConfigError, Overrides};

/// Diversity-driven policy optimization on a graded-vocabulary dialogue world.
#[derive(Parser)]
#[command(name = "ddpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write metrics.csv, curves.csv, summary.json and params.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory, overriding `paths.output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate saved params on every scenario.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Judge URL; the bearer token is read from DDPO_JUDGE_TOKEN.
        #[arg(long)]
        judge_endpoint: Option<String>,
        /// Sample through the vocabulary trie.
        #[arg(long)]
        constrained: bool,
    },
    /// Train both modes from one seed and print their samples side by side.
    Demo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Counts and violation rate for a JSON Lines dialogue corpus.
    CorpusStats {
        corpus: PathBuf,
        /// Take the lexicon from this config instead of the bundled one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<ddpo_core::Error>() {
            return match e {
                ddpo_core::Error::Divergence { .. } => 3,
                ddpo_core::Error::Io(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            mode,
            steps,
            out,
        } => commands::train(&config, &Overrides { mode, steps, output: out }),
        Command::Eval {
            config,
            params,
            out,
            judge_endpoint,
            constrained,
        } => commands::eval(
            &config,
            &params,
            &Overrides {
                output: out,
                ..Overrides::default()
            },
            judge_endpoint,
            constrained,
        ),
        Command::Demo { config, steps, out } => commands::demo(
            &config,
            &Overrides {
                steps,
                output: out,
                ..Overrides::default()
            },
        ),
        Command::CorpusStats { corpus, config } => commands::corpus_stats(&corpus, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
