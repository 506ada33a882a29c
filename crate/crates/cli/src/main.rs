//! `longmem` operator CLI.
//!
//! Exit codes: 0 success, 1 runtime failure (bad data, backend error),
//! 2 usage error (unknown flag, missing argument).

mod commands;
mod repl;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "longmem", version, about = "Multi-session chat memory: data tools, evaluation, chat and serving")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    /// Detect from the file contents.
    Auto,
    /// Canonical episode JSONL written by `ingest`.
    Canonical,
    /// Multi-Session Chat release file or directory.
    Msc,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert an MSC release file or directory into canonical episode JSONL.
    Ingest {
        src: PathBuf,
        dst: PathBuf,
        /// Split to read when `src` is a release directory.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Per-session counts and token statistics.
    Stats {
        data: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        format: Format,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long)]
        json: bool,
    },
    /// Perplexity table for a list of context strategies.
    Eval {
        data: PathBuf,
        /// Strategy file (TOML) or the name of a file under `configs/`.
        #[arg(long)]
        config: String,
        /// Scorer backend: cached-ngram, ngram, uniform or remote.
        #[arg(long, default_value = "cached-ngram")]
        scorer: String,
        /// Training data for n-gram scorers: episodes, or a `.txt` file with one text per line.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Backend settings (TOML, same layout as the server's `[backends]` table).
        #[arg(long)]
        backends: Option<PathBuf>,
        /// Score only session openings.
        #[arg(long)]
        openings_only: bool,
        /// Vary one setting at a time around the first strategy instead.
        #[arg(long)]
        ablation: bool,
        #[arg(long, value_enum, default_value = "auto")]
        format: Format,
        #[arg(long)]
        json: bool,
    },
    /// Interactive chat. Slash commands: /gap N hours|days, /memory, /reply, /save PATH, /quit.
    Chat {
        /// Server-style config (default strategy and backends).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue an existing canonical episode file (its first episode).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the transcript here on exit.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Run the summarizer over episodes and print the resulting memory.
    Memory {
        episodes: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        format: Format,
        /// Use the episodes' own annotations instead of the configured summarizer.
        #[arg(long)]
        gold: bool,
        #[arg(long)]
        backends: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Serve the /v1 HTTP API.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus as canonical episode JSONL.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        carryover: f64,
        /// Also write a scorer training corpus (one text per line) here.
        #[arg(long)]
        corpus_out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest { src, dst, split } => commands::ingest(&src, &dst, &split),
        Command::Stats { data, format, split, json } => commands::stats(&data, format, &split, json),
        Command::Eval { data, config, scorer, train, backends, openings_only, ablation, format, json } => {
            commands::eval(commands::EvalArgs {
                data,
                config,
                scorer,
                train,
                backends,
                openings_only,
                ablation,
                format,
                json,
            })
        }
        Command::Chat { config, resume, save } => repl::run(config.as_deref(), resume.as_deref(), save.as_deref()),
        Command::Memory { episodes, format, gold, backends, json } => {
            commands::memory(&episodes, format, gold, backends.as_deref(), json)
        }
        Command::Serve { port, config, data_dir } => commands::serve(port, config.as_deref(), data_dir),
        Command::Synth { out, episodes, seed, carryover, corpus_out } => {
            commands::synth(&out, episodes, seed, carryover, corpus_out.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
