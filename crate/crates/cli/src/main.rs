//! `e2gan` — train a shared base generator, adapt it to new concepts with low-rank
//! deltas, and measure what that costs.

mod commands;
mod config;
mod error;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{EvalArgs, FinetuneArgs, Split, SynthArgs};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult, EXIT_USER};

#[derive(Debug, Parser)]
#[command(name = "e2gan", version, about = "Efficient per-concept image editing with low-rank adapters")]
struct Cli {
    /// TOML run configuration (defaults apply to anything omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic paired dataset (invert, hue_shift, blur, posterize).
    SynthData {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 64)]
        pairs: usize,
        #[arg(long, default_value_t = 32)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the shared base model on several concepts.
    BuildBase {
        /// Comma-separated concept manifests (defaults to `[data] concepts`).
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick a training coreset of one concept, or representative base concepts.
    SelectData {
        /// Concept whose training pairs are clustered.
        #[arg(long, conflicts_with = "concepts", requires = "out_manifest")]
        concept: Option<PathBuf>,
        /// Candidate base concepts (comma-separated manifests).
        #[arg(long, value_delimiter = ',', requires = "out")]
        concepts: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out_manifest: Option<PathBuf>,
        #[arg(long, conflicts_with = "out_manifest")]
        out: Option<PathBuf>,
    },
    /// Search adapter ranks on probe concepts.
    SearchRank {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<PathBuf>,
        /// Fixed per-round scores instead of training (checks the search loop only).
        #[arg(long, value_delimiter = ',')]
        scripted_scores: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt the base model to one concept.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, required_unless_present = "full")]
        rank_spec: Option<PathBuf>,
        /// Train every generator weight instead of adapters.
        #[arg(long, conflicts_with = "rank_spec")]
        full: bool,
        #[arg(long)]
        concept: PathBuf,
        /// Overrides `[train] epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model (optionally with a concept delta) on a concept split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        delta: Option<PathBuf>,
        #[arg(long)]
        concept: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter, FLOP and training-cost accounting as JSON.
    Account {
        #[arg(long)]
        rank_spec: Option<PathBuf>,
        /// Add published reference figures next to the computed ones.
        #[arg(long)]
        compare: bool,
        /// Training-set size used for the iteration and total-cost estimates.
        #[arg(long, default_value_t = 800)]
        dataset_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::SynthData { task, pairs, resolution, seed, out } => {
            commands::synth_data(&cfg, &SynthArgs { task, pairs, resolution, seed, out })
        }
        Command::BuildBase { concepts, out } => commands::build_base(&cfg, &concepts, &out),
        Command::SelectData { concept, concepts, k, out_manifest, out } => match (concept, out_manifest, out) {
            (Some(c), Some(m), None) => commands::select_data(&cfg, &c, k, &m),
            (None, None, Some(o)) if !concepts.is_empty() => commands::select_concepts(&cfg, &concepts, k, &o),
            _ => Err(CliError::Usage(
                "select-data needs either --concept with --out-manifest, or --concepts with --out".into(),
            )),
        },
        Command::SearchRank { base, concepts, scripted_scores, out } => {
            commands::search_rank(&cfg, base.as_deref(), &concepts, scripted_scores, &out)
        }
        Command::Finetune { base, rank_spec, full, concept, epochs, out } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
                cfg.validate()?;
            }
            commands::finetune(&cfg, &FinetuneArgs { base, rank_spec, full, concept, out })
        }
        Command::Eval { model, delta, concept, split, out } => {
            commands::eval(&cfg, &EvalArgs { model, delta, concept, split, out })
        }
        Command::Account { rank_spec, compare, dataset_size, out } => {
            commands::account(&cfg, rank_spec.as_deref(), compare, dataset_size, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USER) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut message = e.to_string();
            eprintln!("error: {message}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !message.contains(&text) {
                    eprintln!("  caused by: {text}");
                    message = text;
                }
                source = s.source();
            }
            ExitCode::from(e.exit_code())
        }
    }
}
