//! Width sweeps and their CSV tables.

use std::path::Path;

use rayon::prelude::*;
use widthlab::dataset::Dataset;
use widthlab::scaling::Scaling;
use widthlab::trainer::{train_at_width, TrainRecord};

use crate::config::ExperimentConfig;
use crate::error::Result;

pub const RUNS_CSV: &str = "runs.csv";
pub const DECOMP_CSV: &str = "decomp.csv";
pub const INCREMENTS_CSV: &str = "increments.csv";
pub const CONFIG_JSON: &str = "config.json";

#[derive(Clone, Debug)]
pub struct RunSpec {
    pub run_id: usize,
    pub label: String,
    pub scaling: Scaling,
    pub width: usize,
    pub seed: u64,
}

pub struct RunResult {
    pub spec: RunSpec,
    /// `None` when the run could not start, for example an unrepresentable scale.
    pub record: Option<TrainRecord>,
    pub error: Option<String>,
}

/// Runs in scaling, width, seed order; `run_id` is the position.
pub fn plan(cfg: &ExperimentConfig) -> Result<Vec<RunSpec>> {
    let mut out = Vec::new();
    for (label, scaling) in cfg.resolved_scalings()? {
        for &width in &cfg.widths {
            for &seed in &cfg.seeds {
                out.push(RunSpec { run_id: out.len(), label: label.clone(), scaling: scaling.clone(), width, seed });
            }
        }
    }
    Ok(out)
}

pub fn execute(cfg: &ExperimentConfig, spec: RunSpec, train: &Dataset, test: &Dataset) -> RunResult {
    let r = cfg.reference_config(train.d0());
    let schedule = cfg.probe_schedule();
    match train_at_width(train, test, &r, &spec.scaling, spec.width, cfg.alpha, cfg.init, &schedule, spec.seed) {
        Ok(out) => RunResult { spec, record: Some(out.record), error: None },
        Err(e) => RunResult { spec, record: None, error: Some(e.to_string()) },
    }
}

/// Executes every planned run, in parallel, and returns results in plan order.
pub fn run_sweep(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<RunResult>> {
    let specs = plan(cfg)?;
    Ok(specs.into_par_iter().map(|spec| execute(cfg, spec, train, test)).collect())
}

fn num(v: f64) -> String {
    v.to_string()
}

pub fn write_runs(path: &Path, results: &[RunResult], depth: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "run_id", "scaling", "H", "optimizer", "d", "seed", "step", "train_loss", "test_loss", "test_acc", "diverged",
    ])?;
    for res in results {
        let s = &res.spec;
        let head = [
            s.run_id.to_string(),
            s.label.clone(),
            depth.to_string(),
            s.scaling.optimizer.to_string(),
            s.width.to_string(),
            s.seed.to_string(),
        ];
        match &res.record {
            Some(rec) => {
                for st in &rec.steps {
                    let mut row = head.to_vec();
                    row.extend([
                        st.step.to_string(),
                        num(st.train_loss),
                        num(st.test_loss),
                        num(st.test_acc),
                        rec.diverged.to_string(),
                    ]);
                    w.write_record(&row)?;
                }
            }
            None => {
                let mut row = head.to_vec();
                row.extend(["0".into(), num(f64::NAN), num(f64::NAN), num(f64::NAN), "true".into()]);
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_probes(dir: &Path, results: &[RunResult]) -> Result<()> {
    let mut dec = csv::Writer::from_path(dir.join(DECOMP_CSV))?;
    let mut inc = csv::Writer::from_path(dir.join(INCREMENTS_CSV))?;
    dec.write_record(["run_id", "step", "term", "variance"])?;
    inc.write_record(["run_id", "step", "group", "avg_norm"])?;
    for res in results {
        let Some(rec) = &res.record else { continue };
        let id = res.spec.run_id.to_string();
        for p in &rec.probes {
            let step = p.step.to_string();
            for (term, v) in p.variances.iter().flatten() {
                dec.write_record([id.as_str(), &step, term, &num(*v)])?;
            }
            for (group, v) in p.increments.iter().flat_map(|r| r.rows()) {
                inc.write_record([id.as_str(), &step, &group, &num(v)])?;
            }
        }
    }
    dec.flush()?;
    inc.flush()?;
    Ok(())
}

/// Writes every sweep table plus the resolved configuration into `dir`.
pub fn write_sweep(dir: &Path, cfg: &ExperimentConfig, results: &[RunResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_runs(&dir.join(RUNS_CSV), results, cfg.depth)?;
    write_probes(dir, results)?;
    std::fs::write(dir.join(CONFIG_JSON), cfg.to_json())?;
    Ok(())
}
