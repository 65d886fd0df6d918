//! Command-line surface.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration error, 3 data error,
//! 4 numeric error.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{seed_override, RunConfig};
use crate::datagen::{eval_path_for, generate_synthetic, load_dataset, save_dataset, MultiDomainDataset};
use crate::error::{MsfanError, Result};
use crate::trainer::{evaluate, run_ablation, train_with, TrainState};
use crate::{checkpoint, gradcheck};

#[derive(Debug, Parser)]
#[command(name = "msfan", version, about = "Multi-source few-shot domain adaptation on synthetic benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset: writes `<out>.csv` and `<out>.eval.csv`.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset, writing JSONL metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        /// Validate configuration and data, then stop without writing anything.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a checkpoint on a dataset's target domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the cumulative ablation and write a `stage,accuracy` CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb the analytic gradients; the suite must then fail.
        #[arg(long)]
        corrupt: bool,
    },
}

pub fn exit_code(err: &MsfanError) -> u8 {
    match err {
        MsfanError::Config(_) => 2,
        MsfanError::Data(_)
        | MsfanError::Parse { .. }
        | MsfanError::Schema(_)
        | MsfanError::Io { .. }
        | MsfanError::IndexOutOfRange { .. }
        | MsfanError::Dimension(_) => 3,
        MsfanError::Numeric(_) | MsfanError::Degenerate(_) | MsfanError::Domain(_) | MsfanError::State(_) => 4,
    }
}

/// Reads the config file (defaults when absent) and applies the seed override.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            // an unreadable config file is a configuration problem
            MsfanError::Io { path, source } => {
                MsfanError::Config(format!("cannot read config {}: {source}", path.display()))
            }
            other => other,
        })?,
        None => RunConfig::default(),
    };
    Ok(match seed_override()? {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    })
}

fn prefixed(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_checked(data: &Path, cfg: &RunConfig) -> Result<MultiDomainDataset> {
    let ds = load_dataset(data)?;
    cfg.train.validate_for(&ds)?;
    Ok(ds)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| MsfanError::io(path, e))
}

/// Runs one subcommand, writing human-readable output to `out`. Returns the exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<u8> {
    let say = |out: &mut dyn Write, text: String| -> Result<()> {
        writeln!(out, "{text}").map_err(|e| MsfanError::io("<stdout>", e))
    };
    match &cli.command {
        Command::Generate { config, out: prefix } => {
            let cfg = load_config(config.as_deref())?;
            let ds = generate_synthetic(&cfg.generator)?;
            let csv = prefixed(prefix, ".csv");
            save_dataset(&ds, &csv)?;
            say(
                out,
                format!(
                    "wrote {} samples to {} and {}",
                    ds.samples.len(),
                    csv.display(),
                    eval_path_for(&csv).display()
                ),
            )?;
        }
        Command::Train {
            config,
            data,
            metrics_out,
            checkpoint_out,
            dry_run,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_checked(data, &cfg)?;
            if *dry_run {
                say(out, format!("configuration valid for {} samples", ds.samples.len()))?;
                return Ok(0);
            }
            let mut metrics = metrics_out.as_deref().map(create).transpose()?;
            let mut write_err = None;
            let (state, _) = train_with(&ds, &cfg.train, |record| {
                if let (Some(w), None) = (metrics.as_mut(), write_err.as_ref()) {
                    let line = serde_json::to_string(record).expect("metrics serialize");
                    if let Err(e) = writeln!(w, "{line}") {
                        write_err = Some(e);
                    }
                }
            })?;
            if let (Some(e), Some(p)) = (write_err, metrics_out) {
                return Err(MsfanError::io(p, e));
            }
            if let (Some(mut w), Some(p)) = (metrics, metrics_out) {
                w.flush().map_err(|e| MsfanError::io(p, e))?;
            }
            if let Some(p) = checkpoint_out {
                checkpoint::save(p, &cfg, &state.model)?;
            }
            report_accuracy(out, &state, &ds)?;
        }
        Command::Eval { checkpoint: path, data } => {
            let (_, model) = checkpoint::load(path)?;
            let ds = load_dataset(data)?;
            if ds.input_dim != model.extractor.input_dim() {
                return Err(MsfanError::Data(format!(
                    "dataset has {} features, checkpoint expects {}",
                    ds.input_dim,
                    model.extractor.input_dim()
                )));
            }
            if ds.num_sources != model.classifiers.len() {
                return Err(MsfanError::Data(format!(
                    "dataset has {} sources, checkpoint has {} classifiers",
                    ds.num_sources,
                    model.classifiers.len()
                )));
            }
            let acc = evaluate(&model, &ds)?;
            say(
                out,
                format!(
                    "acc_max_similarity={:.6} acc_ensemble={:.6}",
                    acc.max_similarity, acc.ensemble
                ),
            )?;
        }
        Command::Ablate { config, data, out: path } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_checked(data, &cfg)?;
            let table = run_ablation(&ds, &cfg.train)?;
            let mut w = create(path)?;
            let mut text = String::from("stage,accuracy\n");
            for (stage, acc) in &table {
                text.push_str(&format!("{stage},{acc:.6}\n"));
            }
            w.write_all(text.as_bytes())
                .and_then(|_| w.flush())
                .map_err(|e| MsfanError::io(path, e))?;
            out.write_all(text.as_bytes())
                .map_err(|e| MsfanError::io("<stdout>", e))?;
        }
        Command::CheckGrad { seed, corrupt } => {
            let report = gradcheck::run_suite(*seed, *corrupt)?;
            for c in &report.checks {
                say(
                    out,
                    format!(
                        "{:<4} max_rel_err={:.3e} entries={} {}",
                        c.loss,
                        c.max_relative_error,
                        c.entries,
                        if c.passed() { "ok" } else { "FAIL" }
                    ),
                )?;
            }
            return Ok(if report.passed() { 0 } else { 1 });
        }
    }
    Ok(0)
}

fn report_accuracy(out: &mut dyn Write, state: &TrainState, ds: &MultiDomainDataset) -> Result<()> {
    let acc = evaluate(&state.model, ds)?;
    writeln!(
        out,
        "step={} acc_max_similarity={:.6} acc_ensemble={:.6}",
        state.step, acc.max_similarity, acc.ensemble
    )
    .map_err(|e| MsfanError::io("<stdout>", e))
}
