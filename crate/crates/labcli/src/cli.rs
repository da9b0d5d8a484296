//! Argument parsing and command dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use widthlab::scaling::{analyze_scaling, Optimizer, Scaling, DEFAULT_K_MAX};
use widthlab::trainer::train_at_width;
use widthlab::Exponent;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::fit::{fit_tables, write_fits, SweepTables, FITS_CSV};
use crate::limits::{final_gaps, kernel_study, mf_study, write_kernel, write_wasserstein, KERNEL_CSV, WASSERSTEIN_CSV};
use crate::report::write_report;
use crate::sweep::{plan, run_sweep, write_runs, write_sweep, RunResult, CONFIG_JSON, RUNS_CSV};

#[derive(Debug, Parser)]
#[command(name = "widthlab", version, about = "Width-scaling experiments for leaky-ReLU classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify a scaling and print its exponent table as JSON.
    Analyze(AnalyzeArgs),
    /// Train every scaling, width and seed of a config and write CSV tables.
    Sweep(RunArgs),
    /// Fit width exponents in a sweep directory and write fits.csv.
    Fit(DirArgs),
    /// Render SVG figures from a sweep directory.
    Report(DirArgs),
    /// Compare trained nets with the infinite-width kernel dynamics.
    Kernel(RunArgs),
    /// Wasserstein distances between particle measures of growing width.
    Mf(RunArgs),
    /// Train a single net and write its history and checkpoint.
    Train(RunArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, allow_hyphen_values = true)]
    pub q_sigma: Exponent,
    #[arg(long, allow_hyphen_values = true)]
    pub qt_a: Exponent,
    /// Hidden-layer exponents, one per layer.
    #[arg(long, allow_hyphen_values = true, value_delimiter = ',')]
    pub qt_v: Vec<Exponent>,
    #[arg(long, allow_hyphen_values = true)]
    pub qt_w: Exponent,
    #[arg(long, default_value = "gd")]
    pub optimizer: Optimizer,
    #[arg(long, default_value_t = DEFAULT_K_MAX)]
    pub k_max: u32,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DirArgs {
    /// Directory written by `sweep`.
    #[arg(long)]
    pub out: PathBuf,
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(&args.config)?.with_overrides(args.seed, args.out.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Analyze(a) => {
            let s = Scaling::new(a.q_sigma, a.qt_a, a.qt_v, a.qt_w, a.optimizer);
            let report = analyze_scaling(&s, a.k_max);
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Sweep(args) => {
            let cfg = load(&args)?;
            let (train, test) = cfg.dataset.load()?;
            let results = run_sweep(&cfg, &train, &test)?;
            let dir = cfg.out_dir();
            write_sweep(&dir, &cfg, &results)?;
            let bad = results.iter().filter(|r| r.record.as_ref().is_none_or(|rec| rec.diverged)).count();
            eprintln!("{} runs written to {} ({bad} diverged or failed)", results.len(), dir.display());
        }
        Command::Fit(args) => {
            let tables = SweepTables::load(&args.out)?;
            let rows = fit_tables(&tables)?;
            write_fits(&args.out.join(FITS_CSV), &rows)?;
            let matched = rows.iter().filter(|r| r.verdict == "Match").count();
            eprintln!("{} fits, {matched} match their prediction", rows.len());
        }
        Command::Report(args) => {
            for path in write_report(&args.out)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::Kernel(args) => {
            let cfg = load(&args)?;
            let (train, test) = cfg.dataset.load()?;
            let rows = kernel_study(&cfg, &train, &test)?;
            let dir = cfg.out_dir();
            prepare_dir(&dir)?;
            write_kernel(&dir.join(KERNEL_CSV), &rows)?;
            for (d, seed, gap) in final_gaps(&rows) {
                println!("d={d} seed={seed} sup-gap={gap:.4e}");
            }
        }
        Command::Mf(args) => {
            let cfg = load(&args)?;
            let (train, _) = cfg.dataset.load()?;
            let rows = mf_study(&cfg, &train)?;
            let dir = cfg.out_dir();
            prepare_dir(&dir)?;
            write_wasserstein(&dir.join(WASSERSTEIN_CSV), &rows)?;
            for (k, d, d_ref, w2) in rows {
                println!("k={k} d={d} d_ref={d_ref} w2={w2:.4e}");
            }
        }
        Command::Train(args) => train_one(&load(&args)?)?,
    }
    Ok(())
}

fn train_one(cfg: &ExperimentConfig) -> Result<()> {
    let specs = plan(cfg)?;
    let [spec] = specs.as_slice() else {
        return Err(CliError::Usage(format!(
            "train needs one scaling, width and seed; the config expands to {} runs",
            specs.len()
        )));
    };
    let (train, test) = cfg.dataset.load()?;
    let dir = cfg.out_dir();
    prepare_dir(&dir)?;
    let r = cfg.reference_config(train.d0());
    let out =
        train_at_width(&train, &test, &r, &spec.scaling, spec.width, cfg.alpha, cfg.init, &cfg.probe_schedule(), spec.seed)?;
    let diverged = out.record.diverged;
    let halt = out.record.halt_step;
    let result = RunResult { spec: spec.clone(), record: Some(out.record), error: None };
    write_runs(&dir.join(RUNS_CSV), std::slice::from_ref(&result), cfg.depth)?;
    std::fs::write(dir.join(CONFIG_JSON), cfg.to_json())?;
    let checkpoint = out.net.to_json().map_err(|e| CliError::Data(e.to_string()))?;
    std::fs::write(dir.join("checkpoint.json"), checkpoint)?;
    if diverged {
        return Err(CliError::Diverged(format!("run diverged at step {}", halt.unwrap_or(0))));
    }
    let last = result.record.as_ref().expect("set above").last();
    println!("test_loss={:.6} test_acc={:.4}", last.test_loss, last.test_acc);
    Ok(())
}

