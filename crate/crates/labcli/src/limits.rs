//! Infinite-width comparisons: kernel dynamics and particle measures.

use std::path::Path;

use ndarray::{concatenate, s, Axis};
use rayon::prelude::*;
use widthlab::dataset::Dataset;
use widthlab::mf::{kernel_dynamics, measure_of, transition_step, wasserstein2};
use widthlab::net::{gradients, init_network, LossKind};
use widthlab::probes::ntk_limit_gram;
use widthlab::scaling::Optimizer;
use widthlab::trainer::{gd_step, rmsprop_step, scale_hyperparams};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const KERNEL_CSV: &str = "kernel_dyn.csv";
pub const WASSERSTEIN_CSV: &str = "wasserstein.csv";

const KIND: LossKind = LossKind::BinaryCrossEntropy;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelRow {
    pub d: usize,
    pub seed: u64,
    pub step: usize,
    pub point: usize,
    pub net_f: f64,
    pub kernel_f: f64,
}

fn single_shallow(cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if cfg.depth != 0 {
        return Err(CliError::Usage(format!("{what} needs depth 0, got {}", cfg.depth)));
    }
    Ok(())
}

/// Trains each width-seed net and iterates the limit kernel dynamics from the
/// net's own initial outputs, on the first `n_query` test points.
pub fn kernel_study(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<KernelRow>> {
    single_shallow(cfg, "kernel")?;
    let scalings = cfg.resolved_scalings()?;
    let [(_, s)] = scalings.as_slice() else {
        return Err(CliError::Usage(format!("kernel needs exactly one scaling, got {}", scalings.len())));
    };
    let r = cfg.reference_config(train.d0());
    let n_query = cfg.kernel.n_query.min(test.len());
    let queries = test.inputs.slice(s![..n_query, ..]);
    let all = concatenate(Axis(0), &[train.inputs.view(), queries]).expect("same input dimension");
    let n = train.len();

    let jobs: Vec<(usize, u64)> = cfg.widths.iter().flat_map(|&d| cfg.seeds.iter().map(move |&sd| (d, sd))).collect();
    let per_job: Vec<Result<Vec<KernelRow>>> = jobs
        .into_par_iter()
        .map(|(d, seed)| {
            let hp = scale_hyperparams(&r, s, d);
            let s2d = hp.sigma * hp.sigma * d as f64;
            let (gram, _) = ntk_limit_gram(
                train.inputs.view(),
                all.view(),
                hp.eta_hat_a * s2d,
                hp.eta_hat_w * s2d,
                cfg.alpha,
                cfg.kernel.n_mc,
                cfg.kernel.mc_seed,
            );
            let mut net = init_network(0, d, train.d0(), cfg.alpha, hp.sigma, seed, cfg.init)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let init_f = net.outputs(all.view());
            let traj = kernel_dynamics(init_f.view(), gram.view(), train.labels.view(), KIND, cfg.steps)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let batch: Vec<usize> = (0..n).collect();
            let mut accum = net.params.zeros_like();
            let mut rows = Vec::with_capacity((cfg.steps + 1) * n_query);
            for (step, kf) in traj.iter().enumerate() {
                let net_f = net.outputs(queries);
                for p in 0..n_query {
                    rows.push(KernelRow { d, seed, step, point: p, net_f: net_f[p], kernel_f: kf[n + p] });
                }
                if step == cfg.steps {
                    break;
                }
                let g = gradients(&net, train, &batch, KIND);
                let finite = match s.optimizer {
                    Optimizer::Gd => gd_step(&mut net, &g, &hp),
                    Optimizer::RmsProp => rmsprop_step(&mut net, &g, &mut accum, &hp, r.beta, r.eps),
                };
                if !finite {
                    return Err(CliError::Diverged(format!("d={d} seed={seed} diverged at step {}", step + 1)));
                }
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for rows in per_job {
        out.extend(rows?);
    }
    Ok(out)
}

/// Largest `|net_f - kernel_f|` at the final step, per `(d, seed)`.
pub fn final_gaps(rows: &[KernelRow]) -> Vec<(usize, u64, f64)> {
    let last = rows.iter().map(|r| r.step).max().unwrap_or(0);
    let mut out: Vec<(usize, u64, f64)> = Vec::new();
    for r in rows.iter().filter(|r| r.step == last) {
        let gap = (r.net_f - r.kernel_f).abs();
        match out.iter_mut().find(|(d, s, _)| (*d, *s) == (r.d, r.seed)) {
            Some(entry) => entry.2 = entry.2.max(gap),
            None => out.push((r.d, r.seed, gap)),
        }
    }
    out
}

pub fn write_kernel(path: &Path, rows: &[KernelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["d", "seed", "step", "point", "net_f", "kernel_f"])?;
    for r in rows {
        w.write_record([
            r.d.to_string(),
            r.seed.to_string(),
            r.step.to_string(),
            r.point.to_string(),
            r.net_f.to_string(),
            r.kernel_f.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(k, d, d_ref, mean W2 over seeds)` after `mf.steps` transition steps. Each
/// width-`d` measure starts from the leading `d` atoms of the reference draw
/// and is compared with the leading `d` atoms of the evolved reference.
pub fn mf_study(cfg: &ExperimentConfig, train: &Dataset) -> Result<Vec<(usize, usize, usize, f64)>> {
    single_shallow(cfg, "mf")?;
    let m = &cfg.mf;
    if let Some(&d) = cfg.widths.iter().find(|&&d| d > m.d_ref) {
        return Err(CliError::Usage(format!("width {d} exceeds the reference width {}", m.d_ref)));
    }
    let per_seed: Vec<Result<Vec<f64>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let reference = init_network(0, m.d_ref, train.d0(), cfg.alpha, m.sigma_star, seed, cfg.init)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let mut mu_ref = measure_of(&reference).map_err(|e| CliError::Data(e.to_string()))?;
            let mut mus: Vec<_> = cfg.widths.iter().map(|&d| mu_ref.leading(d)).collect();
            for _ in 0..m.steps {
                mu_ref = transition_step(&mu_ref, m.eta_star, m.sigma_star, cfg.alpha, train, KIND);
                for mu in mus.iter_mut() {
                    *mu = transition_step(mu, m.eta_star, m.sigma_star, cfg.alpha, train, KIND);
                }
            }
            mus.iter()
                .map(|mu| wasserstein2(mu, &mu_ref.leading(mu.len())).map_err(|e| CliError::Data(e.to_string())))
                .collect()
        })
        .collect();
    let per_seed = per_seed.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(cfg
        .widths
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let w2 = per_seed.iter().map(|v| v[i]).sum::<f64>() / per_seed.len() as f64;
            (m.steps, d, m.d_ref, w2)
        })
        .collect())
}

pub fn write_wasserstein(path: &Path, rows: &[(usize, usize, usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "d", "d_ref", "w2"])?;
    for (k, d, d_ref, w2) in rows {
        w.write_record([k.to_string(), d.to_string(), d_ref.to_string(), w2.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
