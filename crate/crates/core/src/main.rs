use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmrel::eventgraph::Label;
use mmrel::pipeline::{self, Baseline, Mode, Overrides, PipelineConfig};
use mmrel::synthetic::SyntheticSpec;
use mmrel::{Error, Result};

/// Text-to-video event relation pipeline.
#[derive(Parser)]
#[command(name = "mmrel", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Pipeline config (TOML). Relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Per-document worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Retrieval similarity threshold for pseudo labels.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Identical predictions below this similarity become NoRel.
    #[arg(long, global = true)]
    prune_threshold: Option<f64>,
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus with planted relations and a matching pipeline.toml.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_docs: usize,
        #[arg(long, default_value_t = 100)]
        n_eval_docs: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.5)]
        hierarchy_density: f64,
        #[arg(long, default_value_t = 0.15)]
        identical_density: f64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
    /// Generate pseudo labels for the training corpus.
    PseudoLabel,
    /// Train and freeze the commonsense feature extractor.
    TrainCs,
    /// Train the relation classifier.
    Train {
        /// Relation file to train on instead of the pseudo labels.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score a model or baseline on the evaluation corpus.
    Eval {
        #[arg(long, value_parser = parse_baseline)]
        baseline: Option<Baseline>,
        /// Keep low-similarity Identical predictions.
        #[arg(long)]
        no_prune: bool,
        /// Align predicted text events only on identical trigger spans.
        #[arg(long)]
        exact_span: bool,
    },
    /// Render metrics files (or directories of them) as a table.
    Report {
        /// Metrics files or directories; defaults to the configured report directory.
        inputs: Vec<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(shared: &Shared) -> Result<PipelineConfig> {
    let mut cfg = match &shared.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: shared.seed,
        workers: shared.workers,
        lambda: shared.lambda,
        prune_threshold: shared.prune_threshold,
        mode: shared.mode,
    });
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynthetic {
            out,
            n_docs,
            n_eval_docs,
            noise,
            hierarchy_density,
            identical_density,
            dim,
        } => {
            let seed = match (cli.shared.seed, &cli.shared.config) {
                (Some(s), _) => s,
                (None, Some(_)) => load_config(&cli.shared)?.seed()?,
                (None, None) => return Err(Error::Config("gen-synthetic needs --seed".into())),
            };
            let spec = SyntheticSpec {
                n_docs,
                n_eval_docs,
                noise,
                hierarchy_density,
                identical_density,
                dim,
                seed,
                ..SyntheticSpec::default()
            };
            pipeline::gen_synthetic(&spec, &out)?;
            println!("wrote synthetic corpus to {}", out.display());
        }
        Command::PseudoLabel => {
            let cfg = load_config(&cli.shared)?;
            let set = pipeline::pseudo_label(&cfg)?;
            println!(
                "pseudo labels: {} hierarchical, {} identical, {} conflicts",
                set.count(Label::Hierarchical),
                set.count(Label::Identical),
                set.conflicts.len()
            );
        }
        Command::TrainCs => {
            let cfg = load_config(&cli.shared)?;
            let (_, report) = pipeline::train_commonsense(&cfg)?;
            println!("commonsense extractor trained, final loss {:.6}", report.final_loss);
        }
        Command::Train { labels } => {
            let mut cfg = load_config(&cli.shared)?;
            if labels.is_some() {
                cfg.paths.train_labels = labels;
            }
            let (_, report) = pipeline::train(&cfg)?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "trained {} epochs, weighted loss {:.6}",
                    last.epoch, last.weighted_loss
                );
            }
        }
        Command::Eval {
            baseline,
            no_prune,
            exact_span,
        } => {
            let mut cfg = load_config(&cli.shared)?;
            if let Some(b) = baseline {
                cfg.eval.baseline = b;
            }
            if no_prune {
                cfg.eval.prune = false;
            }
            if exact_span {
                cfg.eval.exact_span = true;
            }
            let eval = pipeline::evaluate(&cfg)?;
            let path = pipeline::write_evaluation(&cfg, &eval)?;
            print!("{}", mmrel::evaluation::render_table(std::slice::from_ref(&eval.report)));
            println!("metrics written to {}", path.display());
        }
        Command::Report { inputs, out } => {
            let inputs = if inputs.is_empty() {
                let cfg = load_config(&cli.shared)?;
                let dir = cfg
                    .paths
                    .report_dir
                    .ok_or_else(|| Error::Config("no inputs given and paths.report_dir is not set".into()))?;
                vec![dir]
            } else {
                inputs
            };
            let (table, _) = pipeline::report(&inputs)?;
            if let Some(path) = out {
                write_text(&path, &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            // Bad flags are configuration errors; help and version exit cleanly.
            return ExitCode::from(if usage_error { 4 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmrel: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
