use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ddnas_core::config::{ablate, Ablation};
use ddnas_core::dag::DerivedArchitecture;
use ddnas_core::eval::{self, Checkpoint, MetricsReport};
use ddnas_core::synthetic::keyword_corpus;
use ddnas_core::text::{Dataset, Example, SplitSpec};
use ddnas_core::trainer::{self, Prepared};
use ddnas_core::{text, Classifier, TrainConfig};

/// Differentiable architecture search over a DAG of 1D operations for text classification.
#[derive(Parser)]
#[command(name = "ddnas", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search an architecture and write it with its logs.
    Search {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train a derived architecture from scratch and write a checkpoint.
    Retrain {
        /// Architecture JSON written by `search`.
        #[arg(long)]
        arch: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
    },
    /// Print a checkpoint's architecture as DOT or its state histograms as CSV.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, conflicts_with = "hist", required_unless_present = "hist")]
        dot: bool,
        #[arg(long, requires = "data")]
        hist: bool,
        /// Documents to histogram (with `--hist`).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search and retrain with operation families or discretization removed.
    Ablate {
        /// `Conv`, `DilatedConv`, `Pooling`, `None` or `discretization`; repeatable.
        #[arg(long, required = true)]
        drop: Vec<String>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Multi-seed search, selection on validation, repeated retraining scored on test.
    Protocol {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a two-class keyword corpus in the dataset format.
    Synth {
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// `label<TAB>text` lines.
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file; unset keys take desk-scale defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds the split and every random draw; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Part {
    All,
    Train,
    Val,
    Test,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::desk(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("override {kv:?} is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn prepare(&self, cfg: &TrainConfig) -> Result<(Dataset, Prepared)> {
        let ds = Dataset::load(&self.data)?;
        let data = trainer::prepare(&ds, cfg)?;
        for w in &data.splits.warnings {
            log::warn!("{w}");
        }
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        write(&self.out.join("config.txt"), &cfg.to_kv())?;
        write(
            &self.out.join("splits.json"),
            &serde_json::to_string_pretty(&data.splits)?,
        )?;
        write(
            &self.out.join("labels.json"),
            &serde_json::to_string_pretty(&data.label_names)?,
        )?;
        Ok((ds, data))
    }
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

fn search(cfg: &TrainConfig, data: &Prepared, out: &Path) -> Result<DerivedArchitecture> {
    let run = trainer::search(
        &data.train,
        &data.val,
        data.vocab.len(),
        data.label_names.len(),
        cfg,
        cfg.seed,
    )?;
    write(&out.join("architecture.json"), &run.architecture.to_json())?;
    write(&out.join("architecture.dot"), &run.architecture.to_dot())?;
    write(
        &out.join("alpha.json"),
        &serde_json::to_string_pretty(&run.alpha)?,
    )?;
    write(
        &out.join("search_log.jsonl"),
        &trainer::epoch_log(&run.epochs)?,
    )?;
    log::info!("best validation accuracy {:.3}", run.best_val_acc);
    Ok(run.architecture)
}

fn test_metrics(
    model: &Classifier,
    examples: &[Example],
    n_classes: usize,
    batch: usize,
) -> Result<MetricsReport> {
    let preds = model.predict(examples, batch)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    Ok(eval::compute_metrics(&preds, &labels, n_classes)?)
}

fn retrain(
    cfg: &TrainConfig,
    data: &Prepared,
    arch: &DerivedArchitecture,
    out: &Path,
) -> Result<MetricsReport> {
    let n_classes = data.label_names.len();
    let run = trainer::retrain(
        arch,
        &data.train,
        &data.val,
        data.vocab.len(),
        n_classes,
        cfg,
        cfg.seed,
    )?;
    Checkpoint::new(&run.model, &data.vocab, &data.label_names, cfg)
        .save(out.join("model.json"))?;
    write(
        &out.join("retrain_log.jsonl"),
        &trainer::epoch_log(&run.epochs)?,
    )?;
    let metrics = test_metrics(&run.model, &data.test, n_classes, cfg.batch_size)?;
    write(
        &out.join("metrics.json"),
        &serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(metrics)
}

/// Encodes the requested part of `path` with the checkpoint's vocabulary,
/// splitting with the checkpoint's own seed and fractions.
fn examples_for(ck: &Checkpoint, path: &Path, part: Part) -> Result<Vec<Example>> {
    let mut ds = Dataset::load(path)?;
    ds.labels = ds.relabel(&ck.label_names)?;
    ds.label_names = ck.label_names.clone();
    let cfg = &ck.config;
    let indices: Vec<usize> = match part {
        Part::All => (0..ds.len()).collect(),
        part => {
            let s = text::split(
                &ds.labels,
                &SplitSpec::new(cfg.train_fraction, cfg.val_fraction, cfg.seed),
            )?;
            match part {
                Part::Train => s.train,
                Part::Val => s.val,
                _ => s.test,
            }
        }
    };
    if indices.is_empty() {
        bail!("no documents selected from {}", path.display());
    }
    Ok(ds.encode_indices(&indices, &ck.vocab, cfg.l_max))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search { run } => {
            let cfg = run.config()?;
            let (_, data) = run.prepare(&cfg)?;
            let arch = search(&cfg, &data, &run.out)?;
            println!("{}", arch.to_json());
        }
        Command::Retrain { arch, run } => {
            let cfg = run.config()?;
            let text =
                fs::read_to_string(&arch).with_context(|| format!("reading {}", arch.display()))?;
            let arch = DerivedArchitecture::from_json(&text)?;
            let (_, data) = run.prepare(&cfg)?;
            let metrics = retrain(&cfg, &data, &arch, &run.out)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Eval { model, data, split } => {
            let ck = Checkpoint::load(&model)?;
            let examples = examples_for(&ck, &data, split)?;
            let metrics = test_metrics(
                &ck.model()?,
                &examples,
                ck.label_names.len(),
                ck.config.batch_size,
            )?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Export {
            model,
            dot,
            hist: _,
            data,
            split,
            out,
        } => {
            let ck = Checkpoint::load(&model)?;
            let m = ck.model()?;
            let text = if dot {
                m.architecture().to_dot()
            } else {
                let path = data.context("--hist needs --data")?;
                let examples = examples_for(&ck, &path, split)?;
                let h = eval::state_histogram(&m, &examples, ck.config.batch_size)?;
                if h.is_degenerate() {
                    log::warn!("every node sends all words to a single state");
                }
                h.to_csv()
            };
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Ablate { drop, run } => {
            let mut cfg = run.config()?;
            for d in &drop {
                let which: Ablation = d.parse()?;
                cfg = ablate(&cfg, which)?;
            }
            let (_, data) = run.prepare(&cfg)?;
            let arch = search(&cfg, &data, &run.out)?;
            let metrics = retrain(&cfg, &data, &arch, &run.out)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Protocol { run } => {
            let cfg = run.config()?;
            let (ds, _) = run.prepare(&cfg)?;
            let report = trainer::select_and_retrain(&ds, &cfg)?;
            if !report.audit.test_is_isolated() {
                bail!("test documents reached search, selection or retraining");
            }
            write(
                &run.out.join("report.json"),
                &serde_json::to_string_pretty(&report)?,
            )?;
            write(
                &run.out.join("architecture.json"),
                &report.architecture.to_json(),
            )?;
            println!(
                "selected seed {}: accuracy {:.4} ± {:.4}, F1 {:.4} ± {:.4} over {} retrains",
                report.selected_seed,
                report.mean_accuracy,
                report.std_accuracy,
                report.mean_f1,
                report.std_f1,
                report.repeats.len()
            );
        }
        Command::Synth { n, seed, out } => write(&out, &keyword_corpus(n, seed).to_tsv())?,
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
