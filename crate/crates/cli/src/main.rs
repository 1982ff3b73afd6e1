//! `versecraft` — train diffusion models over token embeddings, steer them
//! with a metrical controller, and score the output.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{CliError, EvaluateArgs, FixtureArgs, GenerateArgs};
use std::path::PathBuf;
use std::process::ExitCode;
use versecraft::corpus::Language;

#[derive(Parser)]
#[command(name = "versecraft", version, about = "Metrically constrained verse via guided diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the denoiser, embedding table and rounding head.
    Train {
        /// TOML run configuration.
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Train the metrical controller against an existing checkpoint.
    TrainController {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Sample poems for a format template.
    Generate {
        #[arg(long, short)]
        config: PathBuf,
        /// Format template (JSON) produced by make-fixture or by hand.
        #[arg(long)]
        spec: PathBuf,
        /// Number of poems to sample.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Sample without the metrical controller.
        #[arg(long)]
        unguided: bool,
        /// Base seed; per-poem generators derive from (seed, chain index).
        #[arg(long)]
        seed: Option<u64>,
        /// Output JSONL (defaults to <out_dir>/poems.jsonl).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write per-step trace CSVs here.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
        /// Reference corpus for the trace's BLEU proxy column.
        #[arg(long)]
        references: Option<PathBuf>,
    },
    /// Score generated poems (or combine pre-computed components).
    Evaluate {
        #[arg(long, short)]
        config: PathBuf,
        /// Generated poems JSONL.
        #[arg(long)]
        poems: Option<PathBuf>,
        /// Reference corpus JSONL (defaults to the config's heldout).
        #[arg(long)]
        references: Option<PathBuf>,
        /// Reference templates JSONL (songci scoring).
        #[arg(long)]
        templates: Option<PathBuf>,
        /// Score pre-computed components (JSON) instead of poems.
        #[arg(long)]
        components: Option<PathBuf>,
        /// Directory of trace CSVs to aggregate into step_scores.csv.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Write the report JSON here as well as stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the full default configuration as TOML.
    PrintConfig,
    /// Write a synthetic corpus, lexicon, templates and a ready config.
    MakeFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "sonnet")]
        language: LanguageArg,
        #[arg(long, default_value_t = 500)]
        poems: usize,
        #[arg(long, default_value_t = 50)]
        heldout: usize,
        #[arg(long, default_value_t = 5)]
        templates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LanguageArg {
    Sonnet,
    Songci,
}

impl From<LanguageArg> for Language {
    fn from(l: LanguageArg) -> Language {
        match l {
            LanguageArg::Sonnet => Language::Sonnet,
            LanguageArg::Songci => Language::SongCi,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successes, everything else is a usage error
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train { config } => commands::cmd_train(&config),
        Command::TrainController { config } => commands::cmd_train_controller(&config),
        Command::Generate {
            config,
            spec,
            count,
            unguided,
            seed,
            out,
            trace_dir,
            references,
        } => commands::cmd_generate(
            &config,
            &GenerateArgs {
                spec,
                count,
                unguided,
                seed,
                out,
                trace_dir,
                references,
            },
        ),
        Command::Evaluate {
            config,
            poems,
            references,
            templates,
            components,
            traces,
            out,
        } => commands::cmd_evaluate(
            &config,
            &EvaluateArgs {
                poems,
                references,
                templates,
                components,
                traces,
                out,
            },
        ),
        Command::PrintConfig => commands::cmd_print_config(),
        Command::MakeFixture {
            out,
            language,
            poems,
            heldout,
            templates,
            seed,
        } => commands::cmd_make_fixture(&FixtureArgs {
            out,
            language: language.into(),
            poems,
            heldout,
            templates,
            seed,
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
