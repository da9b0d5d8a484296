//! Joins sweep tables, fits width exponents and attaches predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use widthlab::powerlaw::{compare_slope, fit_loglog, Verdict};
use widthlab::scaling::{predict_at_step, Exactness, DEFAULT_K_MAX};
use widthlab::Exponent;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::sweep::{CONFIG_JSON, DECOMP_CSV, INCREMENTS_CSV, RUNS_CSV};

pub const FITS_CSV: &str = "fits.csv";
/// Largest accepted gap between fitted and predicted exponents.
pub const TOLERANCE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: usize,
    pub scaling: String,
    #[serde(rename = "H")]
    pub depth: usize,
    pub optimizer: String,
    pub d: usize,
    pub seed: u64,
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompRow {
    pub run_id: usize,
    pub step: usize,
    pub term: String,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementRow {
    pub run_id: usize,
    pub step: usize,
    pub group: String,
    pub avg_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub scaling: String,
    #[serde(rename = "H")]
    pub depth: usize,
    pub optimizer: String,
    pub observable: String,
    pub predicted_q: Exponent,
    pub fitted_q: f64,
    pub stderr: f64,
    /// `Match`, `Mismatch`, or `Unfit` when too few widths survived.
    pub verdict: String,
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Errors unless every named file exists in `dir`.
pub fn require_files(dir: &Path, names: &[&str]) -> Result<()> {
    let missing: Vec<&str> = names.iter().copied().filter(|n| !dir.join(n).is_file()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing in {}: {}", dir.display(), missing.join(", "))))
    }
}

pub struct SweepTables {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRow>,
    pub decomp: Vec<DecompRow>,
    pub increments: Vec<IncrementRow>,
}

impl SweepTables {
    pub fn load(dir: &Path) -> Result<Self> {
        require_files(dir, &[RUNS_CSV, DECOMP_CSV, INCREMENTS_CSV, CONFIG_JSON])?;
        let text = std::fs::read_to_string(dir.join(CONFIG_JSON))?;
        let config = ExperimentConfig::from_json(&text).map_err(|e| CliError::Data(e.to_string()))?;
        Ok(SweepTables {
            config,
            runs: read_csv(&dir.join(RUNS_CSV))?,
            decomp: read_csv(&dir.join(DECOMP_CSV))?,
            increments: read_csv(&dir.join(INCREMENTS_CSV))?,
        })
    }

    /// `run_id -> (scaling label, width)` for runs that never diverged.
    pub fn healthy_runs(&self) -> BTreeMap<usize, (String, usize)> {
        let diverged: BTreeSet<usize> = self.runs.iter().filter(|r| r.diverged).map(|r| r.run_id).collect();
        self.runs
            .iter()
            .filter(|r| !diverged.contains(&r.run_id))
            .map(|r| (r.run_id, (r.scaling.clone(), r.d)))
            .collect()
    }
}

type Points = Vec<(f64, f64)>;

/// `(label, step, key) -> [(d, value)]` over healthy runs.
type Series = BTreeMap<(String, usize, String), Points>;

fn collect<'a>(
    healthy: &BTreeMap<usize, (String, usize)>,
    rows: impl Iterator<Item = (usize, usize, &'a str, f64)>,
) -> Series {
    let mut out = Series::new();
    for (run_id, step, key, v) in rows {
        if let Some((label, d)) = healthy.get(&run_id) {
            out.entry((label.clone(), step, key.to_string())).or_default().push((*d as f64, v));
        }
    }
    out
}

fn judge(slope: f64, predicted: Exponent, exactness: Exactness) -> Verdict {
    match exactness {
        Exactness::Exact => compare_slope(slope, predicted, TOLERANCE),
        Exactness::UpperBound if slope <= predicted.to_f64() + TOLERANCE => Verdict::Match,
        Exactness::UpperBound => Verdict::Mismatch,
    }
}

/// One row per scaling, probe step (after the first update) and observable.
/// Variance slopes are halved so they compare with exponents of the values.
pub fn fit_tables(t: &SweepTables) -> Result<Vec<FitRow>> {
    let healthy = t.healthy_runs();
    let variances = collect(&healthy, t.decomp.iter().map(|r| (r.run_id, r.step, r.term.as_str(), r.variance)));
    let increments =
        collect(&healthy, t.increments.iter().map(|r| (r.run_id, r.step, r.group.as_str(), r.avg_norm)));
    let cfg = &t.config;
    let mut rows = Vec::new();
    for (label, scaling) in cfg.resolved_scalings().map_err(|e| CliError::Data(e.to_string()))? {
        let steps: BTreeSet<usize> =
            variances.keys().chain(increments.keys()).filter(|k| k.0 == label && k.1 > 0).map(|k| k.1).collect();
        for step in steps {
            let pred = predict_at_step(&scaling, step as u32, DEFAULT_K_MAX);
            let mut observables: Vec<(String, Exponent, Option<&Points>, bool)> = Vec::new();
            let var = |key: &str| variances.get(&(label.clone(), step, key.to_string()));
            observables.push(("var_f".into(), pred.output, var("f"), true));
            for (term, q) in &pred.terms {
                observables.push((format!("var_{term}"), *q, var(term), true));
            }
            for (group, q) in &pred.increments {
                observables.push((format!("inc_{group}"), *q, increments.get(&(label.clone(), step, group.clone())), false));
            }
            for (name, predicted, points, halve) in observables {
                let Some(points) = points else { continue };
                let fit = fit_loglog(points).map(|f| if halve { f.halved() } else { f });
                let (fitted_q, stderr, verdict) = match fit {
                    Ok(f) => (f.slope, f.stderr_slope, judge(f.slope, predicted, pred.exactness).to_string()),
                    Err(_) => (f64::NAN, f64::NAN, "Unfit".to_string()),
                };
                rows.push(FitRow {
                    scaling: label.clone(),
                    depth: cfg.depth,
                    optimizer: cfg.optimizer.to_string(),
                    observable: format!("{name}@{step}"),
                    predicted_q: predicted,
                    fitted_q,
                    stderr,
                    verdict,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_fits(path: &Path, rows: &[FitRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["scaling", "H", "optimizer", "observable", "predicted_q", "fitted_q", "stderr", "verdict"])?;
    }
    w.flush()?;
    Ok(())
}
