//! `fgc`: train, evaluate, analyze, and export datasets for dynamically
//! pruned gated networks.
//!
//! Exit codes: 0 on success, 1 on usage/configuration errors, 2 on numeric
//! failures (NaN/Inf surfacing mid-run).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use fgc::analyze::{analyze, AnalysisOptions};
use fgc::checkpoint::Checkpoint;
use fgc::config::{load_config, DatasetConfig, RunConfig};
use fgc::data;
use fgc::error::{Error, Result};
use fgc::rng::derive_seed;
use fgc::train::Trainer;

#[derive(Parser)]
#[command(
    name = "fgc",
    version,
    about = "Dynamic channel pruning with feature-gate coupling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run from a config file (TOML or JSON)
    Train {
        /// Config file; optional when resuming (the checkpoint embeds it)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for log.ndjson and checkpoint.fgck
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Resume from a checkpoint produced by an earlier train run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with hard gates and print the metrics record
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to evaluate: train or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Force every gate open (ungated reference)
        #[arg(long)]
        force_open: bool,
        /// Optional directory to append eval.ndjson into
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit NMI, execution-frequency, ranking and embedding reports
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to analyze: train or test
        #[arg(long, default_value = "test")]
        split: String,
        /// Number of query instances in the gate-similarity ranking
        #[arg(long, default_value_t = 8)]
        queries: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate the configured synthetic dataset and write IDX files
    ExportDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn cmd_train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut trainer = match &resume {
        Some(ckpt_path) => {
            if seed.is_some() {
                return Err(Error::config(
                    "--seed cannot be combined with --resume (the checkpoint fixes the seed)",
                ));
            }
            let ckpt = Checkpoint::load(ckpt_path)?;
            if let Some(cfg_path) = &config {
                let cfg = load_config(cfg_path)?;
                if cfg.stable_hash() != ckpt.config_hash {
                    return Err(Error::config(format!(
                        "config {} does not match the checkpoint's config (hash mismatch)",
                        cfg_path.display()
                    )));
                }
            }
            Trainer::from_checkpoint(&ckpt)?
        }
        None => {
            let cfg_path = config.ok_or_else(|| {
                Error::config("--config is required unless --resume is given")
            })?;
            let mut cfg: RunConfig = load_config(&cfg_path)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            Trainer::new(cfg)?
        }
    };

    ensure_dir(&out)?;
    let log_path = out.join("log.ndjson");
    let log_display = log_path.display().to_string();
    // Resumed runs append; fresh runs truncate.
    let mut log_file = if resume.is_some() {
        fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_display, e))?
    } else {
        fs::File::create(&log_path).map_err(|e| Error::io(&log_display, e))?
    };

    let remaining = trainer.config.epochs.saturating_sub(trainer.epoch);
    trainer.run(remaining, |record| {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::parse("log.ndjson", e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_display, e))?;
        eprintln!(
            "epoch {:>3}  ce {:.4}  train_err {:.4}  eval_err {:.4}  pruning {:.4}",
            record.epoch, record.ce, record.train_error, record.eval_error, record.pruning_ratio
        );
        Ok(())
    })?;

    let ckpt_path = out.join("checkpoint.fgck");
    trainer.to_checkpoint().save(&ckpt_path)?;
    let eval = trainer.evaluate_test(false)?;
    let line = serde_json::to_string(&eval).map_err(|e| Error::parse("eval", e.to_string()))?;
    println!("{line}");
    eprintln!(
        "saved {} and {} ({} epochs total)",
        ckpt_path.display(),
        log_path.display(),
        trainer.epoch
    );
    Ok(())
}

fn dataset_for_split<'t>(trainer: &'t Trainer, split: &str) -> Result<&'t data::Dataset> {
    match split {
        "train" => Ok(&trainer.train_data),
        "test" => Ok(&trainer.test_data),
        other => Err(Error::config(format!(
            "unknown split '{other}' (expected train or test)"
        ))),
    }
}

fn cmd_eval(checkpoint: PathBuf, split: String, force_open: bool, out: Option<PathBuf>) -> Result<()> {
    let ckpt = Checkpoint::load(&checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let dataset = dataset_for_split(&trainer, &split)?;
    let split_tag: &'static str = if split == "train" { "train" } else { "test" };
    let eval = trainer.evaluate(dataset, split_tag, force_open)?;
    let line = serde_json::to_string(&eval).map_err(|e| Error::parse("eval", e.to_string()))?;
    println!("{line}");
    if let Some(dir) = out {
        ensure_dir(&dir)?;
        let path = dir.join("eval.ndjson");
        let display = path.display().to_string();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&display, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&display, e))?;
    }
    Ok(())
}

fn cmd_analyze(checkpoint: PathBuf, split: String, queries: usize, out: PathBuf) -> Result<()> {
    let ckpt = Checkpoint::load(&checkpoint)?;
    let trainer = Trainer::from_checkpoint(&ckpt)?;
    let dataset = dataset_for_split(&trainer, &split)?;
    ensure_dir(&out)?;
    let bundle = analyze(&trainer, dataset, AnalysisOptions { queries }, Some(&out))?;
    let line = serde_json::to_string(&bundle.summary)
        .map_err(|e| Error::parse("analysis", e.to_string()))?;
    println!("{line}");
    for f in &bundle.files {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_export_dataset(config: PathBuf, out: PathBuf) -> Result<()> {
    let cfg = load_config(&config)?;
    let DatasetConfig::Synth {
        classes,
        train_per_class,
        test_per_class,
        image_size,
        geometry,
        noise_sigma,
        seed,
    } = cfg.dataset
    else {
        return Err(Error::config(
            "export-dataset needs a synthetic dataset block (idx datasets already exist on disk)",
        ));
    };
    ensure_dir(&out)?;
    let train = data::synth_clusters(
        classes,
        train_per_class,
        image_size,
        geometry,
        noise_sigma,
        derive_seed(seed, 0),
    )?;
    let test = data::synth_clusters(
        classes,
        test_per_class,
        image_size,
        geometry,
        noise_sigma,
        derive_seed(seed, 1),
    )?;
    for (ds, tag) in [(&train, "train"), (&test, "test")] {
        let images = out.join(format!("{tag}-images.idx"));
        let labels = out.join(format!("{tag}-labels.idx"));
        data::write_idx(ds, &images, &labels)?;
        eprintln!("wrote {} and {}", images.display(), labels.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => cmd_train(config, seed, out, resume),
        Command::Eval {
            checkpoint,
            split,
            force_open,
            out,
        } => cmd_eval(checkpoint, split, force_open, out),
        Command::Analyze {
            checkpoint,
            split,
            queries,
            out,
        } => cmd_analyze(checkpoint, split, queries, out),
        Command::ExportDataset { config, out } => cmd_export_dataset(config, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric { .. } => 2,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
