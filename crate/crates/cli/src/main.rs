//! `drift`: prepare data, train biased and debiased models, evaluate, run
//! cheating-rate sweeps and bias audits.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage or
//! configuration error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::builder::{PossibleValuesParser, TypedValueParser};
use clap::{Args, Parser, Subcommand};
use drift_core::biaslab::StressKind;
use drift_core::featurize::ExtractorKind;
use drift_core::objectives::Objective;

use crate::commands::{EvalArgs, SplitName};
use crate::config::{BiasedKind, DataFormat, RunConfig};

/// Marks errors that should exit with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn objective_parser() -> impl TypedValueParser<Value = Objective> {
    PossibleValuesParser::new(["mle", "drift", "remove"]).map(|s| s.parse::<Objective>().expect("listed value"))
}

fn extractor_parser() -> impl TypedValueParser<Value = ExtractorKind> {
    PossibleValuesParser::new(["hypo", "cbow", "hand", "full"])
        .map(|s| s.parse::<ExtractorKind>().expect("listed value"))
}

fn stress_parser() -> impl TypedValueParser<Value = StressKind> {
    PossibleValuesParser::new(["overlap", "negation"]).map(|s| s.parse::<StressKind>().expect("listed value"))
}

#[derive(Parser, Debug)]
#[command(name = "drift", version, about = "Residual-fitting debiasing for sentence-pair classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; flags override its keys.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, value_name = "PATH")]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<DataFormat>,
    /// Data file to split, or a directory written by `prepare`.
    #[arg(long, value_name = "PATH")]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or parse a dataset, split it and write JSONL splits plus a vocabulary.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write its checkpoint and training history.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = objective_parser())]
        objective: Option<Objective>,
        /// Feature extractor of the model being trained.
        #[arg(long, value_parser = extractor_parser())]
        extractor: Option<ExtractorKind>,
        /// Biased model kind for drift/remove; `oracle` needs cheat-injected data.
        #[arg(long, value_enum)]
        biased: Option<BiasedKind>,
        #[arg(long, value_name = "PATH")]
        biased_checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Expected extractor of the checkpoint.
        #[arg(long, value_parser = extractor_parser())]
        extractor: Option<ExtractorKind>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Append a distractor phrase to every hypothesis before evaluating.
        #[arg(long, value_parser = stress_parser())]
        stress: Option<StressKind>,
        /// Print the first N evaluated examples.
        #[arg(long, value_name = "N")]
        dump_examples: Option<usize>,
    },
    /// Train and evaluate every method across cheating rates.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cheating rates.
        #[arg(long, value_delimiter = ',', value_name = "CSV")]
        rates: Option<Vec<f64>>,
    },
    /// Compare insufficient-feature models against the majority baseline.
    Audit {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(format) = common.format {
        cfg.data.format = format;
    }
    if let Some(path) = &common.data {
        cfg.data.path = Some(path.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            commands::prepare(&cfg)
        }
        Command::Train { common, objective, extractor, biased, biased_checkpoint } => {
            let mut cfg = resolve(&common)?;
            if let Some(o) = objective {
                cfg.train.objective = o;
            }
            if let Some(e) = extractor {
                cfg.model.extractor = e;
            }
            if biased.is_some() {
                cfg.biased.kind = biased;
            }
            if biased_checkpoint.is_some() {
                cfg.biased.checkpoint = biased_checkpoint;
            }
            cfg.validate()?;
            commands::train(&cfg)
        }
        Command::Eval { common, checkpoint, extractor, split, stress, dump_examples } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            commands::eval(&cfg, &EvalArgs { checkpoint, extractor, split, stress, dump_examples })
        }
        Command::Sweep { common, rates } => {
            let mut cfg = resolve(&common)?;
            if let Some(r) = rates {
                cfg.sweep.rates = r;
            }
            cfg.validate()?;
            commands::sweep(&cfg)
        }
        Command::Audit { common } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            commands::audit(&cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
