//! `vulnmil`: corpus generation, vocabulary and model training, prediction,
//! evaluation and annotated reports.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vulnmil::corpus::{dataset_stats, dataset_to_jsonl, generate_synthetic, label_statements_from_fix, load_dataset, load_fix_pairs, split_of};
use vulnmil::metrics::predict_all;
use vulnmil::model::Model;
use vulnmil::pipeline::{check_vocab, evaluate_samples, prepare, train_model, train_vocab};
use vulnmil::report::{render_annotated, render_json, render_table, score_dump};
use vulnmil::segmenter::{BpeVocab, FunctionSample, Split};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "vulnmil", version, about = "Statement-level vulnerability detection from function labels")]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Pseudo-labeled statements per function.
    #[arg(long)]
    k: Option<usize>,
    /// Token limit per function.
    #[arg(long = "max-len")]
    max_len: Option<usize>,
    /// Statement decision threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct ModelIo {
    /// Dataset in JSON Lines.
    #[arg(long)]
    dataset: PathBuf,
    /// Vocabulary file written by `train-vocab`.
    #[arg(long)]
    vocab: PathBuf,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split to score: train, valid, test or all.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn BPE merges from the training split.
    TrainVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "vocab-size")]
        vocab_size: Option<usize>,
    },
    /// Train a model; prints one JSON line per epoch.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Checkpoint destination.
        #[arg(long)]
        out: PathBuf,
        /// Also write the epoch log here.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write per-statement scores and rankings as JSON Lines.
    Predict {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelIo,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the metric table; optionally write the JSON report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelIo,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annotated source with scores and top-ranked lines marked.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        io: ModelIo,
        /// Lines to mark per function.
        #[arg(long, default_value_t = 3)]
        top: usize,
        /// Only this function.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset summary table.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Label pre-fix functions from `{id, code_before, code_after}` pairs.
    LabelFixes {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(common.seed, common.k, common.max_len, common.threshold)?;
    Ok(cfg)
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<Vec<FunctionSample>> {
    load_dataset(path).context("cannot load --dataset")
}

fn read_vocab(path: &Path) -> Result<BpeVocab> {
    BpeVocab::load(path).with_context(|| format!("cannot load vocabulary {}", path.display()))
}

fn read_model(path: &Path) -> Result<Model> {
    Model::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn pick_split(samples: &[FunctionSample], split: &str) -> Result<Vec<FunctionSample>> {
    if split == "all" {
        return Ok(samples.to_vec());
    }
    let s = Split::from_str(split).map_err(anyhow::Error::msg).context("invalid --split")?;
    let picked = split_of(samples, s);
    if picked.is_empty() {
        bail!("the dataset has no `{split}` functions (use --split all to score everything)");
    }
    Ok(picked)
}

struct Loaded {
    samples: Vec<FunctionSample>,
    vocab: BpeVocab,
    model: Model,
}

fn load_io(io: &ModelIo, cfg: &RunConfig) -> Result<Loaded> {
    let model = read_model(&io.checkpoint)?;
    let vocab = read_vocab(&io.vocab)?;
    check_vocab(&model, &vocab).context("--vocab does not belong to --checkpoint")?;
    if let Some(len) = cfg.max_len_override {
        if len != model.config.encoder.max_len {
            bail!(
                "--max-len {len} differs from the checkpoint's max_len {}",
                model.config.encoder.max_len
            );
        }
    }
    let samples = pick_split(&read_dataset(&io.dataset)?, &io.split)?;
    Ok(Loaded { samples, vocab, model })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, out } => {
            let cfg = load_config(&common)?;
            let ds = generate_synthetic(&cfg.corpus).context("invalid [corpus] settings")?;
            write_out(&out, &dataset_to_jsonl(&ds))?;
            eprintln!("wrote {} functions to {}", ds.len(), out.display());
        }
        Command::TrainVocab {
            common,
            dataset,
            out,
            vocab_size,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = vocab_size {
                cfg.vocab_size = v;
            }
            let ds = read_dataset(&dataset)?;
            let vocab = train_vocab(&ds, cfg.vocab_size)?;
            vocab
                .save(&out)
                .with_context(|| format!("cannot write {}", out.display()))?;
            eprintln!("wrote {} entries to {}", vocab.len(), out.display());
        }
        Command::Train {
            common,
            dataset,
            vocab,
            out,
            log,
            epochs,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.max_epochs = e;
            }
            let ds = read_dataset(&dataset)?;
            let vocab = read_vocab(&vocab)?;
            let mut log_file = match &log {
                Some(p) => Some(fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?),
                None => None,
            };
            let mut log_err = None;
            let outcome = train_model(&ds, &vocab, &cfg.experiment(), |rec| {
                let line = serde_json::to_string(rec).expect("record serializes");
                println!("{line}");
                if let Some(f) = log_file.as_mut() {
                    if let Err(e) = writeln!(f, "{line}") {
                        log_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = log_err {
                return Err(e).context("cannot write the epoch log");
            }
            outcome
                .model
                .save(&out)
                .with_context(|| format!("cannot write {}", out.display()))?;
            eprintln!(
                "best epoch {} of {}; checkpoint written to {}",
                outcome.best_epoch,
                outcome.history.len(),
                out.display()
            );
        }
        Command::Predict { common, io, out } => {
            let cfg = load_config(&common)?;
            let l = load_io(&io, &cfg)?;
            let prepared = prepare(&l.samples, &l.vocab, l.model.config.encoder.max_len)?;
            let preds = predict_all(&l.model, &prepared, cfg.threshold)?;
            write_out(&out, &score_dump(&preds))?;
            eprintln!("scored {} functions into {}", preds.len(), out.display());
        }
        Command::Evaluate { common, io, out } => {
            let cfg = load_config(&common)?;
            let l = load_io(&io, &cfg)?;
            let (_, _, report) = evaluate_samples(&l.model, &l.vocab, &l.samples, cfg.threshold)?;
            print!("{}", render_table(&report));
            if let Some(out) = out {
                write_out(&out, &render_json(&report))?;
            }
        }
        Command::Report {
            common,
            io,
            top,
            id,
            out,
        } => {
            let cfg = load_config(&common)?;
            let mut l = load_io(&io, &cfg)?;
            if let Some(id) = &id {
                l.samples.retain(|s| &s.id == id);
                if l.samples.is_empty() {
                    bail!("no function `{id}` in the selected split");
                }
            }
            let prepared = prepare(&l.samples, &l.vocab, l.model.config.encoder.max_len)?;
            let preds = predict_all(&l.model, &prepared, cfg.threshold)?;
            let mut text = String::new();
            for (s, p) in prepared.iter().zip(&preds) {
                text.push_str(&render_annotated(&s.sample, p, top));
                text.push('\n');
            }
            match out {
                Some(out) => write_out(&out, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Stats { dataset, json } => {
            let st = dataset_stats(&read_dataset(&dataset)?);
            if json {
                println!("{}", serde_json::to_string_pretty(&st)?);
            } else {
                print!("{}", st.to_table());
            }
        }
        Command::LabelFixes { pairs, out } => {
            let pairs = load_fix_pairs(&pairs).context("cannot load --pairs")?;
            let samples: Vec<FunctionSample> = pairs.iter().map(label_statements_from_fix).collect();
            let vulnerable = samples.iter().filter(|s| s.is_vulnerable()).count();
            write_out(&out, &dataset_to_jsonl(&samples))?;
            eprintln!("labeled {} functions ({vulnerable} vulnerable) into {}", samples.len(), out.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
