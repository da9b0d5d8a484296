//! Observables measured on a net: output decomposition into
//! initialization/increment terms, increment magnitudes, data variances and
//! tangent kernels.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{dphi, phi, NetState};
use crate::scaling::subset_label;

/// Largest depth for which the full subset decomposition is computed.
pub const MAX_DECOMP_DEPTH: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("decomposition supports H <= {MAX_DECOMP_DEPTH}, got H = {0}")]
    TooDeep(usize),
    #[error("kernel is only defined for one hidden layer, got H = {0}")]
    NotShallow(usize),
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
}

/// Decomposition of the outputs on a batch of inputs.
#[derive(Clone, Debug)]
pub struct DecompBatch {
    /// Term labels, indexed by group mask (bit order `[a, v1.., w]`).
    pub labels: Vec<String>,
    /// `n x 2^(H+2)` term values.
    pub values: Array2<f64>,
    pub f: Array1<f64>,
    /// Largest `|f - sum of terms| / (1 + |f|)` over the batch.
    pub max_residual: f64,
}

/// Decomposition at a single input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompReport {
    pub terms: Vec<(String, f64)>,
    pub f: f64,
    pub sum_check: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementReport {
    pub avg_abs_da: f64,
    /// Mean absolute entry of each hidden-layer increment.
    pub avg_abs_dv: Vec<f64>,
    pub avg_norm_dw: f64,
}

impl IncrementReport {
    /// `(group, value)` rows in the order `a, v1.., w`.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut out = vec![("a".to_string(), self.avg_abs_da)];
        out.extend(self.avg_abs_dv.iter().enumerate().map(|(h, &v)| (format!("v{}", h + 1), v)));
        out.push(("w".to_string(), self.avg_norm_dw));
        out
    }
}

/// Splits `f` into `2^(H+2)` terms. Each term takes, per parameter group,
/// either the initial weights or the increment, while every activation gate
/// `phi'` is evaluated at the current weights. Leaky ReLU satisfies
/// `phi(z) = phi'(z) z`, so the gated net is multilinear in the groups and the
/// terms add up to `f`.
pub fn decomposition_batch(net: &NetState, x: ArrayView2<'_, f64>) -> Result<DecompBatch, ProbeError> {
    let depth = net.depth;
    if depth > MAX_DECOMP_DEPTH {
        return Err(ProbeError::TooDeep(depth));
    }
    let alpha = net.alpha;
    let current = net.forward_batch(x);
    let gates: Vec<Array2<f64>> = current.preacts.iter().map(|z| z.mapv(|v| dphi(v, alpha))).collect();
    let init = net.init_snapshot();
    let inc = net.increments();
    let bit_a = 1usize;
    let bit_v = |h: usize| 1usize << h;
    let bit_w = 1usize << (depth + 1);

    let gate = |mut m: Array2<f64>, g: &Array2<f64>| {
        m *= g;
        m
    };
    let mut partial: Vec<(usize, Array2<f64>)> = vec![
        (0, gate(x.dot(&init.w.t()), &gates[0])),
        (bit_w, gate(x.dot(&inc.w.t()), &gates[0])),
    ];
    for h in 1..=depth {
        let mut next = Vec::with_capacity(partial.len() * 2);
        for (mask, m) in &partial {
            next.push((*mask, gate(m.dot(&init.v[h - 1].t()), &gates[h])));
            next.push((mask | bit_v(h), gate(m.dot(&inc.v[h - 1].t()), &gates[h])));
        }
        partial = next;
    }
    let n_terms = 1usize << (depth + 2);
    let scale = net.output_scale();
    let mut values = Array2::<f64>::zeros((x.nrows(), n_terms));
    for (mask, m) in &partial {
        values.column_mut(*mask).assign(&(m.dot(&init.a) * scale));
        values.column_mut(mask | bit_a).assign(&(m.dot(&inc.a) * scale));
    }
    let sums = values.sum_axis(Axis(1));
    let max_residual = Zip::from(&sums)
        .and(&current.f)
        .fold(0.0f64, |acc, &s, &f| acc.max((s - f).abs() / (1.0 + f.abs())));
    Ok(DecompBatch {
        labels: (0..n_terms).map(|m| subset_label(depth, m)).collect(),
        values,
        f: current.f,
        max_residual,
    })
}

pub fn decomposition_terms(net: &NetState, x: ArrayView1<'_, f64>) -> Result<DecompReport, ProbeError> {
    let batch = decomposition_batch(net, x.insert_axis(Axis(0)))?;
    let row = batch.values.row(0);
    let terms = batch.labels.iter().cloned().zip(row.iter().copied()).collect();
    Ok(DecompReport { terms, f: batch.f[0], sum_check: (row.sum() - batch.f[0]).abs() })
}

/// Data variance of every decomposition term, plus `("f", Var f)` first.
pub fn decomposition_variances(net: &NetState, x: ArrayView2<'_, f64>) -> Result<Vec<(String, f64)>, ProbeError> {
    let batch = decomposition_batch(net, x)?;
    let mut out = vec![("f".to_string(), data_variance(batch.f.view())?)];
    for (label, col) in batch.labels.iter().zip(batch.values.columns()) {
        out.push((label.clone(), data_variance(col)?));
    }
    Ok(out)
}

pub fn increment_norms(net: &NetState) -> IncrementReport {
    let inc = net.increments();
    let d = net.width as f64;
    IncrementReport {
        avg_abs_da: inc.a.iter().map(|v| v.abs()).sum::<f64>() / d,
        avg_abs_dv: inc.v.iter().map(|v| v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64).collect(),
        avg_norm_dw: inc.w.rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / d,
    }
}

/// Unbiased sample variance.
pub fn data_variance(values: ArrayView1<'_, f64>) -> Result<f64, ProbeError> {
    let n = values.len();
    if n < 2 {
        return Err(ProbeError::TooFewValues { needed: 2, got: n });
    }
    let mean = values.sum() / n as f64;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
}

/// Empirical tangent kernel with one scaled learning rate for both layers.
pub fn ntk_kernel(net: &NetState, x: ArrayView1<'_, f64>, xp: ArrayView1<'_, f64>, eta_hat: f64) -> Result<f64, ProbeError> {
    ntk_kernel_grouped(net, x, xp, eta_hat, eta_hat)
}

/// `sigma^2 sum_r (eta_a phi(w_r.x) phi(w_r.x') + eta_w a_r^2 phi'(w_r.x) phi'(w_r.x') x.x')`.
pub fn ntk_kernel_grouped(
    net: &NetState,
    x: ArrayView1<'_, f64>,
    xp: ArrayView1<'_, f64>,
    eta_a: f64,
    eta_w: f64,
) -> Result<f64, ProbeError> {
    let g = ntk_gram(net, x.insert_axis(Axis(0)), xp.insert_axis(Axis(0)), eta_a, eta_w)?;
    Ok(g[[0, 0]])
}

/// Tangent kernel between every row of `x1` and every row of `x2`.
pub fn ntk_gram(
    net: &NetState,
    x1: ArrayView2<'_, f64>,
    x2: ArrayView2<'_, f64>,
    eta_a: f64,
    eta_w: f64,
) -> Result<Array2<f64>, ProbeError> {
    if net.depth != 0 {
        return Err(ProbeError::NotShallow(net.depth));
    }
    let s2 = net.sigma * net.sigma;
    Ok(kernel_from_atoms(net.params.a.view(), net.params.w.view(), net.alpha, x1, x2, s2 * eta_a, s2 * eta_w))
}

/// `pa * Phi1 Phi2^T + pw * (D1 D2^T) .* (X1 X2^T)` summed over atoms.
fn kernel_from_atoms(
    a: ArrayView1<'_, f64>,
    w: ArrayView2<'_, f64>,
    alpha: f64,
    x1: ArrayView2<'_, f64>,
    x2: ArrayView2<'_, f64>,
    pa: f64,
    pw: f64,
) -> Array2<f64> {
    let z1 = x1.dot(&w.t());
    let z2 = x2.dot(&w.t());
    let act = |z: &Array2<f64>| z.mapv(|v| phi(v, alpha));
    let der = |z: &Array2<f64>| {
        let mut d = z.mapv(|v| dphi(v, alpha));
        d *= &a;
        d
    };
    let mut k = act(&z1).dot(&act(&z2).t()) * pa;
    let cross = der(&z1).dot(&der(&z2).t()) * x1.dot(&x2.t());
    k.scaled_add(pw, &cross);
    k
}

/// Draws per chunk in the Monte-Carlo kernel estimates.
const MC_CHUNK: usize = 1 << 14;
/// Batches used for the batch-means standard error.
const MC_BATCHES: usize = 32;

/// Monte-Carlo estimate of the infinite-width kernel
/// `E_{(a, w) ~ N(0, I)} [pa phi(w.x) phi(w.x') + pw a^2 phi'(w.x) phi'(w.x') x.x']`
/// between all row pairs, with the same draws shared by every pair.
/// Returns the estimate and a batch-means standard error (zero for a single
/// draw).
pub fn ntk_limit_gram(
    x1: ArrayView2<'_, f64>,
    x2: ArrayView2<'_, f64>,
    pa: f64,
    pw: f64,
    alpha: f64,
    n_mc: usize,
    seed: u64,
) -> (Array2<f64>, Array2<f64>) {
    assert!(n_mc >= 1, "need at least one draw");
    let d0 = x1.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = (x1.nrows(), x2.nrows());
    let n_batches = n_mc.min(MC_BATCHES);
    let mut sum = Array2::<f64>::zeros(shape);
    let mut batch_means = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let size = n_mc / n_batches + usize::from(b < n_mc % n_batches);
        let mut batch = Array2::<f64>::zeros(shape);
        let mut done = 0;
        while done < size {
            let m = MC_CHUNK.min(size - done);
            let a = Array1::from_shape_simple_fn(m, || rng.sample::<f64, _>(StandardNormal));
            let w = Array2::from_shape_simple_fn((m, d0), || rng.sample::<f64, _>(StandardNormal));
            batch += &kernel_from_atoms(a.view(), w.view(), alpha, x1, x2, pa, pw);
            done += m;
        }
        sum += &batch;
        batch_means.push(batch / size as f64);
    }
    let mean = sum / n_mc as f64;
    let mut stderr = Array2::<f64>::zeros(shape);
    if n_batches > 1 {
        for bm in &batch_means {
            Zip::from(&mut stderr).and(bm).and(&mean).for_each(|s, &m_b, &mu| *s += (m_b - mu).powi(2));
        }
        let nb = n_batches as f64;
        stderr.mapv_inplace(|v| (v / (nb * (nb - 1.0))).sqrt());
    }
    (mean, stderr)
}

/// Scalar version of [`ntk_limit_gram`] with a shared prefactor
/// `eta_hat * sigma^2 * d`.
pub fn ntk_limit_kernel(
    x: ArrayView1<'_, f64>,
    xp: ArrayView1<'_, f64>,
    eta_hat_sigma2: f64,
    alpha: f64,
    n_mc: usize,
    seed: u64,
) -> (f64, f64) {
    let (m, s) = ntk_limit_gram(
        x.insert_axis(Axis(0)),
        xp.insert_axis(Axis(0)),
        eta_hat_sigma2,
        eta_hat_sigma2,
        alpha,
        n_mc,
        seed,
    );
    (m[[0, 0]], s[[0, 0]])
}
