//! SVG figures from sweep tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use widthlab::scaling::{predict_at_step, DEFAULT_K_MAX};

use crate::error::{CliError, Result};
use crate::fit::SweepTables;
use crate::svg::{Chart, Guide, Series};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Averages values sharing an abscissa.
fn averaged(points: BTreeMap<usize, Vec<f64>>) -> Vec<(f64, f64)> {
    points.into_iter().map(|(x, v)| (x as f64, mean(&v))).collect()
}

pub fn build_charts(t: &SweepTables) -> Result<Vec<(&'static str, Chart)>> {
    let healthy = t.healthy_runs();
    let labels: Vec<(String, widthlab::scaling::Scaling)> =
        t.config.resolved_scalings().map_err(|e| CliError::Data(e.to_string()))?;
    let mut last_step: BTreeMap<usize, usize> = BTreeMap::new();
    for r in &t.runs {
        let e = last_step.entry(r.run_id).or_default();
        *e = (*e).max(r.step);
    }

    let mut by_width = Chart {
        title: "Final test loss".into(),
        x_label: "width d".into(),
        y_label: "test loss".into(),
        log_x: true,
        ..Default::default()
    };
    let mut by_step = Chart {
        title: "Test loss during training (largest width)".into(),
        x_label: "step".into(),
        y_label: "test loss".into(),
        ..Default::default()
    };
    let mut variance = Chart {
        title: "Output variance over inputs".into(),
        x_label: "width d".into(),
        y_label: "Var f".into(),
        log_x: true,
        log_y: true,
        ..Default::default()
    };

    for (label, scaling) in &labels {
        let rows: Vec<_> = t.runs.iter().filter(|r| &r.scaling == label && healthy.contains_key(&r.run_id)).collect();
        if rows.is_empty() {
            continue;
        }
        let mut finals: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| last_step[&r.run_id] == r.step) {
            finals.entry(r.d).or_default().push(r.test_loss);
        }
        by_width.series.push(Series { name: label.clone(), points: averaged(finals) });

        let widest = rows.iter().map(|r| r.d).max().expect("nonempty");
        let mut steps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.d == widest) {
            steps.entry(r.step).or_default().push(r.test_loss);
        }
        by_step.series.push(Series { name: format!("{label} d={widest}"), points: averaged(steps) });

        let decomp: Vec<_> = t
            .decomp
            .iter()
            .filter(|r| r.term == "f" && healthy.get(&r.run_id).is_some_and(|(l, _)| l == label))
            .collect();
        let Some(probe_step) = decomp.iter().map(|r| r.step).max() else { continue };
        let mut var_f: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in decomp.iter().filter(|r| r.step == probe_step) {
            var_f.entry(healthy[&r.run_id].1).or_default().push(r.variance);
        }
        let points = averaged(var_f);
        if let (Some(&first), Some(&last)) = (points.first(), points.last()) {
            if probe_step > 0 && last.0 > first.0 {
                let q = predict_at_step(scaling, probe_step as u32, DEFAULT_K_MAX).output;
                let slope = 2.0 * q.to_f64();
                variance.guides.push(Guide {
                    name: format!("theory d^{}", q * 2),
                    from: first,
                    to: (last.0, first.1 * (last.0 / first.0).powf(slope)),
                });
            }
        }
        variance.series.push(Series { name: format!("{label} step {probe_step}"), points });
    }
    Ok(vec![("loss_vs_width.svg", by_width), ("loss_vs_step.svg", by_step), ("var_f_vs_width.svg", variance)])
}

/// Writes the figures into `dir` and returns their paths.
pub fn write_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let tables = SweepTables::load(dir)?;
    let mut written = Vec::new();
    for (name, chart) in build_charts(&tables)? {
        let path = dir.join(name);
        std::fs::write(&path, chart.render())?;
        written.push(path);
    }
    Ok(written)
}
