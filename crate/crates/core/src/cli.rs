//! Command-line front end: `train`, `eval`, `bounds` and `plot`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::bounds::{run_bounds, BoundsSpec, DEFAULT_SPEC};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{load_cifar10_binary, Dataset};
use crate::metrics::{emit_plots, write_metrics_csv, MetricsRow};
use crate::trainer::{evaluate, run_training, CheckpointWriter, TrainData, TrainState};

/// Environment variable naming the directory under which runs are created.
pub const RUN_ROOT_ENV: &str = "SEMISUP_RUN_ROOT";

#[derive(Debug, Parser)]
#[command(name = "semisup", version, about = "Semi-supervised classification with entropy bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config; writes a run directory.
    Train {
        /// Config file. Omit to use the bundled desk config.
        config: Option<PathBuf>,
        /// Dotted-key override, e.g. `--set objective.lambda=0`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run directory; defaults to `$SEMISUP_RUN_ROOT/<name>-seed<seed>`.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Top-1/top-5 error of a checkpoint, raw and EMA.
    Eval {
        checkpoint: PathBuf,
        /// Dataset in the CIFAR-10 binary record format.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Run config whose test set is evaluated (e.g. a run's `config.toml`).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Verify the entropy bounds on a distribution spec.
    Bounds {
        /// Spec file; the bundled default when omitted.
        spec: Option<PathBuf>,
        /// Emit the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Render accuracy and utilization curves from a metrics CSV.
    Plot { csv: PathBuf, out_dir: PathBuf },
}

/// Summary written to `report.json` at the end of a run.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub steps: u64,
    pub seed: u64,
    pub top1_err_ema: Option<f64>,
    pub top5_err_ema: Option<f64>,
    pub top1_err_raw: Option<f64>,
    pub top5_err_raw: Option<f64>,
    /// Mean logged mask rate over the last quarter of training.
    pub final_quarter_mask_rate: Option<f64>,
    pub wall_seconds: f64,
}

pub fn final_quarter_mask_rate(rows: &[MetricsRow], total_steps: u64) -> Option<f64> {
    let from = total_steps - total_steps / 4;
    let tail: Vec<f64> = rows.iter().filter(|r| r.step > from).map(|r| r.mask_rate).collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}

fn default_run_dir(config_path: Option<&Path>, config: &RunConfig) -> PathBuf {
    let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stem = config_path
        .and_then(|p| p.file_stem())
        .map_or_else(|| "desk".to_string(), |s| s.to_string_lossy().into_owned());
    root.join(format!("{stem}-seed{}", config.seed))
}

pub fn cmd_train(
    config_path: Option<&Path>,
    overrides: &[String],
    run_dir: Option<PathBuf>,
    resume: Option<&Path>,
) -> anyhow::Result<PathBuf> {
    let config = match config_path {
        Some(p) => RunConfig::from_file(p, overrides)?,
        None => RunConfig::from_toml_str(crate::config::DESK_CONFIG, overrides)?,
    };
    let dir = run_dir.unwrap_or_else(|| default_run_dir(config_path, &config));
    fs::create_dir_all(&dir).with_context(|| format!("creating run directory {}", dir.display()))?;
    fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    let data = TrainData::from_config(&config)?;
    let resume = resume.map(load_checkpoint).transpose()?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let start = Instant::now();
    let outcome = run_training(&config, &data, resume, &mut CheckpointWriter { dir: &ckpt_dir })?;
    let wall_seconds = start.elapsed().as_secs_f64();
    write_metrics_csv(&outcome.rows, dir.join("metrics.csv"))?;
    save_checkpoint(&outcome.state, ckpt_dir.join("final.bin"))?;
    let eval = |p| -> anyhow::Result<(Option<f64>, Option<f64>)> {
        Ok(match &data.test {
            Some(t) if !t.is_empty() => {
                let (a, b) = evaluate(p, t, config.train.eval_batch, 5)?;
                (Some(a), Some(b))
            }
            _ => (None, None),
        })
    };
    let (top1_err_ema, top5_err_ema) = eval(&outcome.state.ema)?;
    let (top1_err_raw, top5_err_raw) = eval(&outcome.state.params)?;
    let report = RunReport {
        steps: outcome.state.step,
        seed: config.seed,
        top1_err_ema,
        top5_err_ema,
        top1_err_raw,
        top5_err_raw,
        final_quarter_mask_rate: final_quarter_mask_rate(&outcome.rows, config.train.total_steps),
        wall_seconds,
    };
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(dir)
}

/// `(model, top1, top5)` rows for the raw and EMA parameters.
pub fn cmd_eval(state: &TrainState, dataset: &Dataset, batch: usize) -> anyhow::Result<Vec<(String, f64, f64)>> {
    if dataset.class_count != state.params.arch.classes {
        bail!(
            "checkpoint has {} classes, dataset has {}",
            state.params.arch.classes,
            dataset.class_count
        );
    }
    if let Some(e) = dataset.labeled.first() {
        let a = &state.params.arch;
        if e.image.dims() != (a.in_channels, a.height, a.width) {
            bail!(
                "checkpoint expects {}x{}x{} images, dataset has {:?}",
                a.in_channels,
                a.height,
                a.width,
                e.image.dims()
            );
        }
    }
    let mut out = Vec::new();
    for (name, p) in [("raw", &state.params), ("ema", &state.ema)] {
        let (t1, t5) = evaluate(p, dataset, batch, 5)?;
        out.push((name.to_string(), t1, t5));
    }
    Ok(out)
}

fn eval_table(rows: &[(String, f64, f64)]) -> String {
    let mut s = String::from("model,top1_err,top5_err\n");
    for (m, a, b) in rows {
        s.push_str(&format!("{m},{a},{b}\n"));
    }
    s
}

pub fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            run_dir,
            resume,
        } => {
            let dir = cmd_train(config.as_deref(), &overrides, run_dir, resume.as_deref())?;
            eprintln!("run directory: {}", dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            csv,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let dataset = match (data, config) {
                (Some(d), None) => load_cifar10_binary(&d)?,
                (None, Some(c)) => TrainData::from_config(&RunConfig::from_file(&c, &[])?)?
                    .test
                    .context("config defines no test set")?,
                _ => bail!("pass exactly one of --data or --config"),
            };
            let table = eval_table(&cmd_eval(&state, &dataset, 256)?);
            print!("{table}");
            if let Some(path) = csv {
                fs::write(path, &table)?;
            }
        }
        Command::Bounds { spec, json } => {
            let spec = match spec {
                Some(p) => BoundsSpec::from_file(p)?,
                None => BoundsSpec::from_toml_str(DEFAULT_SPEC)?,
            };
            let report = run_bounds(&spec)?;
            let mut out = std::io::stdout().lock();
            if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                write!(out, "{report}")?;
            }
            if !report.all_passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Plot { csv, out_dir } => {
            for p in emit_plots(&csv, &out_dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Entry point used by the binary.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
