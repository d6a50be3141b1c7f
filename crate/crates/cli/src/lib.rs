//! Command-line workflows for the stacked span model: training, k-fold
//! cross-validation, evaluation, prediction, ablation, bucketed analysis,
//! gradient checking and label conversion.

pub mod commands;
pub mod config;
pub mod folds;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use stsn::evaluation::Criterion;

use config::{ConfigError, RunConfig, Variant};

#[derive(Debug, Parser)]
#[command(name = "stsn", version, about = "Joint entity and relation extraction with stacked span interaction")]
pub struct Cli {
    /// TOML run configuration; defaults apply to every omitted key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Interaction mode, or `no_label` for the label-free ablation.
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Variant>,
    /// Restricts scoring to one criterion: ner, ner_head, re or re_plus.
    #[arg(long, global = true, value_parser = parse_criterion)]
    pub criterion: Option<Criterion>,
    /// Number of cross-validation folds.
    #[arg(long, global = true)]
    pub folds: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Prediction file to score instead of running a checkpoint.
    #[arg(long, global = true)]
    pub predictions: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, or k models under --folds.
    Train,
    /// Score predictions against the gold documents.
    Evaluate,
    /// Write predictions for every document.
    Predict,
    /// Train and score every interaction mode.
    Ablate,
    /// Scores bucketed by entity length and by text length.
    Analyze,
    /// Compare analytic and finite-difference gradients.
    Gradcheck,
    /// Convert gold annotations to extended BIO labels, or decode labels back.
    Tags {
        /// CoNLL label file to decode into entities.
        #[arg(long)]
        decode: Option<PathBuf>,
    },
}

fn parse_criterion(s: &str) -> Result<Criterion, String> {
    s.parse::<Criterion>().map_err(|e| e.to_string())
}

/// Loads the configuration and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(c) = cli.criterion {
        cfg.criteria = vec![c];
    }
    if let Some(k) = cli.folds {
        cfg.k_folds = Some(k);
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(c) = &cli.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(p) = &cli.predictions {
        cfg.predictions = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::Tags { decode: Some(path) } = &cli.command {
        print!("{}", commands::decode_tags(path)?);
        return Ok(());
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Train => commands::train_command(&cfg),
        Command::Evaluate => commands::evaluate_command(&cfg),
        Command::Predict => commands::predict_command(&cfg),
        Command::Ablate => commands::ablate_command(&cfg).map(|_| ()),
        Command::Analyze => commands::analyze_command(&cfg),
        Command::Gradcheck => commands::gradcheck_command(&cfg, cli.mode).map(|_| ()),
        Command::Tags { .. } => commands::tags_command(&cfg),
    }
}

/// 2 for configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.downcast_ref::<ConfigError>().is_some()) {
        2
    } else {
        1
    }
}
