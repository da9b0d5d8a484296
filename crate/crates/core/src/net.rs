//! Leaky-ReLU MLPs in hat parameterization.
//!
//! Hat weights have unit-variance initialization at every width. The output is
//! `f(x) = sigma^(H+1) * sum_r a_r phi(f^H_r(x))` with `f^h = V^h phi(f^(h-1))`
//! and `f^0 = W x`, so all width dependence of the initialization scale lives
//! in the single prefactor. No biases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("width must be at least 1")]
    ZeroWidth,
    #[error("input dimension must be at least 1")]
    ZeroInputDim,
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("leaky slope must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum InitDist {
    #[default]
    StdNormal,
    /// Uniform on `[-sqrt 3, sqrt 3]`, unit variance and compact support.
    SymmetricUniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum LossKind {
    #[default]
    BinaryCrossEntropy,
}

/// Leaky ReLU `phi(z) = max(z, 0) - alpha max(-z, 0)`.
#[inline]
pub fn phi(z: f64, alpha: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        alpha * z
    }
}

/// Derivative of [`phi`], taking the value 1 at zero.
#[inline]
pub fn dphi(z: f64, alpha: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        alpha
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `l(y, z) = softplus(z) - y z`.
pub fn loss(_kind: LossKind, y: f64, z: f64) -> f64 {
    softplus(z) - y * z
}

/// `dl/dz = logistic(z) - y`.
pub fn dloss(_kind: LossKind, y: f64, z: f64) -> f64 {
    logistic(z) - y
}

/// One array per parameter group. Used for weights, gradients, optimizer
/// state and increments alike.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub a: Array1<f64>,
    pub v: Vec<Array2<f64>>,
    pub w: Array2<f64>,
}

impl Params {
    pub fn zeros(depth: usize, width: usize, d0: usize) -> Self {
        Params {
            a: Array1::zeros(width),
            v: (0..depth).map(|_| Array2::zeros((width, width))).collect(),
            w: Array2::zeros((width, d0)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params::zeros(self.v.len(), self.a.len(), self.w.ncols())
    }

    /// `self += k * other`.
    pub fn scaled_add(&mut self, k: f64, other: &Params) {
        self.a.scaled_add(k, &other.a);
        for (v, o) in self.v.iter_mut().zip(&other.v) {
            v.scaled_add(k, o);
        }
        self.w.scaled_add(k, &other.w);
    }

    pub fn sub(&self, other: &Params) -> Params {
        let mut out = self.clone();
        out.scaled_add(-1.0, other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().all(|x| x.is_finite())
            && self.v.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.w.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        let m = |it: &mut dyn Iterator<Item = &f64>| it.fold(0.0f64, |acc, x| acc.max(x.abs()));
        let mut best = m(&mut self.a.iter()).max(m(&mut self.w.iter()));
        for v in &self.v {
            best = best.max(m(&mut v.iter()));
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetState {
    pub depth: usize,
    pub width: usize,
    pub d0: usize,
    pub alpha: f64,
    /// Geometric-mean scale; the output prefactor is `sigma^(H+1)`.
    pub sigma: f64,
    pub params: Params,
    init: Params,
}

/// Hidden pre-activations for a batch, `[f^0, .., f^H]`, each `n x d`.
#[derive(Clone, Debug)]
pub struct BatchForward {
    pub f: Array1<f64>,
    pub preacts: Vec<Array2<f64>>,
}

fn draw(rng: &mut ChaCha8Rng, dist: InitDist) -> f64 {
    match dist {
        InitDist::StdNormal => rng.sample(StandardNormal),
        InitDist::SymmetricUniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
    }
}

/// Random hat weights. Output weight `a_r` and input row `w_r` are drawn unit
/// by unit from one seeded stream, so for the same seed the first `d` units of
/// a wider net equal the units of a width-`d` net. Hidden matrices follow.
pub fn init_network(
    depth: usize,
    width: usize,
    d0: usize,
    alpha: f64,
    sigma: f64,
    seed: u64,
    dist: InitDist,
) -> Result<NetState, NetError> {
    if width == 0 {
        return Err(NetError::ZeroWidth);
    }
    if d0 == 0 {
        return Err(NetError::ZeroInputDim);
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(NetError::BadSigma(sigma));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(NetError::BadAlpha(alpha));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::zeros(depth, width, d0);
    for r in 0..width {
        p.a[r] = draw(&mut rng, dist);
        for j in 0..d0 {
            p.w[[r, j]] = draw(&mut rng, dist);
        }
    }
    for v in p.v.iter_mut() {
        v.mapv_inplace(|_| draw(&mut rng, dist));
    }
    Ok(NetState::from_params(alpha, sigma, p))
}

impl NetState {
    /// Builds a net whose initialization snapshot is `params`.
    pub fn from_params(alpha: f64, sigma: f64, params: Params) -> Self {
        NetState {
            depth: params.v.len(),
            width: params.a.len(),
            d0: params.w.ncols(),
            alpha,
            sigma,
            init: params.clone(),
            params,
        }
    }

    pub fn init_snapshot(&self) -> &Params {
        &self.init
    }

    /// Current weights minus initial weights.
    pub fn increments(&self) -> Params {
        self.params.sub(&self.init)
    }

    pub fn output_scale(&self) -> f64 {
        self.sigma.powi(self.depth as i32 + 1)
    }

    /// Copy with different current weights and the same snapshot.
    pub fn with_params(&self, params: Params) -> NetState {
        NetState { params, ..self.clone() }
    }

    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> BatchForward {
        forward_with(&self.params, self.alpha, self.output_scale(), x)
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> (f64, Vec<Array1<f64>>) {
        let x2 = x.insert_axis(Axis(0));
        let out = self.forward_batch(x2);
        let pre = out.preacts.into_iter().map(|p| p.row(0).to_owned()).collect();
        (out.f[0], pre)
    }

    pub fn outputs(&self, x: ArrayView2<'_, f64>) -> Array1<f64> {
        self.forward_batch(x).f
    }

    pub fn to_json(&self) -> Result<String, NetError> {
        serde_json::to_string(self).map_err(|e| NetError::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<NetState, NetError> {
        let net: NetState = serde_json::from_str(s).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        let dims_ok = net.params.a.len() == net.width
            && net.params.v.len() == net.depth
            && net.params.w.dim() == (net.width, net.d0)
            && net.init.w.dim() == net.params.w.dim();
        if !dims_ok {
            return Err(NetError::Checkpoint("dimensions do not match header".into()));
        }
        Ok(net)
    }
}

/// Forward pass with explicit weights, used by probes that substitute groups.
pub fn forward_with(p: &Params, alpha: f64, scale: f64, x: ArrayView2<'_, f64>) -> BatchForward {
    let mut preacts = Vec::with_capacity(p.v.len() + 1);
    preacts.push(x.dot(&p.w.t()));
    for v in &p.v {
        let act = preacts.last().expect("nonempty").mapv(|z| phi(z, alpha));
        preacts.push(act.dot(&v.t()));
    }
    let last = preacts.last().expect("nonempty").mapv(|z| phi(z, alpha));
    let f = last.dot(&p.a) * scale;
    BatchForward { f, preacts }
}

/// Mean loss and accuracy (threshold at 0) over a dataset.
pub fn evaluate(net: &NetState, ds: &Dataset, kind: LossKind) -> (f64, f64) {
    score(net.outputs(ds.inputs.view()).view(), ds.labels.view(), kind)
}

/// Mean loss and accuracy of precomputed outputs.
pub fn score(f: ArrayView1<'_, f64>, labels: ArrayView1<'_, f64>, kind: LossKind) -> (f64, f64) {
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut correct = 0usize;
    for (&z, &y) in f.iter().zip(labels) {
        total += loss(kind, y, z);
        if (z > 0.0) == (y == 1.0) {
            correct += 1;
        }
    }
    (total / n, correct as f64 / n)
}

/// Gradients of the batch-mean loss with respect to the hat weights,
/// including the output prefactor.
pub fn gradients(net: &NetState, ds: &Dataset, batch: &[usize], kind: LossKind) -> Params {
    assert!(!batch.is_empty(), "empty batch");
    let natural = batch.len() == ds.len() && batch.iter().enumerate().all(|(i, &j)| i == j);
    if natural {
        gradients_on(net, ds.inputs.view(), ds.labels.view(), kind)
    } else {
        let x = ds.inputs.select(Axis(0), batch);
        let y = ds.labels.select(Axis(0), batch);
        gradients_on(net, x.view(), y.view(), kind)
    }
}

pub fn gradients_on(net: &NetState, x: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, kind: LossKind) -> Params {
    let alpha = net.alpha;
    let scale = net.output_scale();
    let m = x.nrows() as f64;
    let p = &net.params;
    let BatchForward { f, preacts } = forward_with(p, alpha, scale, x);
    let g: Array1<f64> = Zip::from(&f).and(&y).map_collect(|&z, &t| dloss(kind, t, z));

    let depth = p.v.len();
    let acts: Vec<Array2<f64>> = preacts.iter().map(|z| z.mapv(|v| phi(v, alpha))).collect();
    let grad_a = acts[depth].t().dot(&g) * (scale / m);

    // delta = d(sum_i l_i)/d preacts[h], scaled by 1/m at the end.
    let mut delta = Array2::from_shape_fn(preacts[depth].dim(), |(i, r)| {
        scale * g[i] * p.a[r] * dphi(preacts[depth][[i, r]], alpha)
    });
    let mut grad_v = vec![Array2::zeros((0, 0)); depth];
    for h in (1..=depth).rev() {
        let v = &p.v[h - 1];
        grad_v[h - 1] = delta.t().dot(&acts[h - 1]) / m;
        let mut back = delta.dot(v);
        Zip::from(&mut back).and(&preacts[h - 1]).for_each(|b, &z| *b *= dphi(z, alpha));
        delta = back;
    }
    let grad_w = delta.t().dot(&x) / m;
    Params { a: grad_a, v: grad_v, w: grad_w }
}
