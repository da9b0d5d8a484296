//! Hyperparameter scaling and GD / RMSProp training loops.
//!
//! A reference net of width `d*` with Kaiming-style initialization and raw
//! learning rates `eta*` is mapped to width `d` by a [`Scaling`]: the product
//! scale moves as `(d/d*)^q_sigma`, carried by the output and hidden layers
//! while the input layer keeps its scale, and the hat learning rates move as
//! `(d/d*)^qt`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{batch_indices, Dataset};
use crate::net::{evaluate, gradients, init_network, score, InitDist, LossKind, NetError, NetState, Params};
use crate::probes::{decomposition_variances, increment_norms, IncrementReport, ProbeError};
use crate::scaling::{Optimizer, Scaling};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub d_star: usize,
    pub eta_star_a: f64,
    pub eta_star_v: f64,
    pub eta_star_w: f64,
    pub sigma_star_a: f64,
    pub sigma_star_v: f64,
    pub sigma_star_w: f64,
    pub beta: f64,
    pub eps: f64,
    pub steps: usize,
    /// `None` trains full batch.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl ReferenceConfig {
    /// Defaults for the given optimizer and input dimension: `d* = 128`,
    /// `sigma*_a = sigma*_v = d*^(-1/2)`, `sigma*_w = d0^(-1/2)`, 50 steps.
    pub fn new(optimizer: Optimizer, d0: usize) -> Self {
        let d_star = 128;
        let eta = match optimizer {
            Optimizer::Gd => 0.02,
            Optimizer::RmsProp => 0.0002,
        };
        ReferenceConfig {
            d_star,
            eta_star_a: eta,
            eta_star_v: eta,
            eta_star_w: eta,
            sigma_star_a: 1.0 / (d_star as f64).sqrt(),
            sigma_star_v: 1.0 / (d_star as f64).sqrt(),
            sigma_star_w: 1.0 / (d0 as f64).sqrt(),
            beta: 0.99,
            eps: 1e-12,
            steps: 50,
            batch_size: None,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta_star_a = eta;
        self.eta_star_v = eta;
        self.eta_star_w = eta;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Geometric-mean scale of the reference net with `depth` hidden layers.
    pub fn sigma_star(&self, depth: usize) -> f64 {
        let prod = self.sigma_star_a * self.sigma_star_v.powi(depth as i32) * self.sigma_star_w;
        prod.powf(1.0 / (depth as f64 + 1.0))
    }

    pub fn validate(&self) -> Result<(), String> {
        let pos = [
            ("eta_star_a", self.eta_star_a),
            ("eta_star_v", self.eta_star_v),
            ("eta_star_w", self.eta_star_w),
            ("sigma_star_a", self.sigma_star_a),
            ("sigma_star_v", self.sigma_star_v),
            ("sigma_star_w", self.sigma_star_w),
        ];
        for (name, v) in pos {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if self.d_star == 0 {
            return Err("d_star must be positive".into());
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if self.batch_size == Some(0) {
            return Err("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Scales and hat learning rates at one width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledHyperparams {
    pub sigma: f64,
    pub sigma_a: f64,
    pub sigma_v: f64,
    pub sigma_w: f64,
    pub eta_hat_a: f64,
    pub eta_hat_v: Vec<f64>,
    pub eta_hat_w: f64,
    pub optimizer: Optimizer,
}

impl ScaledHyperparams {
    /// Raw learning rates `(eta_a, eta_v, eta_w)` implied by the hat rates.
    pub fn raw_etas(&self) -> (f64, Vec<f64>, f64) {
        let conv = |eta_hat: f64, s: f64| match self.optimizer {
            Optimizer::Gd => eta_hat * s * s,
            Optimizer::RmsProp => eta_hat * s,
        };
        (
            conv(self.eta_hat_a, self.sigma_a),
            self.eta_hat_v.iter().map(|&e| conv(e, self.sigma_v)).collect(),
            conv(self.eta_hat_w, self.sigma_w),
        )
    }
}

fn hat_rate(eta: f64, sigma: f64, optimizer: Optimizer) -> f64 {
    match optimizer {
        Optimizer::Gd => eta / (sigma * sigma),
        Optimizer::RmsProp => eta / sigma,
    }
}

pub fn scale_hyperparams(r: &ReferenceConfig, s: &Scaling, d: usize) -> ScaledHyperparams {
    scale_between(r, s, r.d_star as f64, d as f64)
}

/// Rescale from width `from` to width `to`, starting at the reference values
/// when `from = d*`.
fn scale_between(r: &ReferenceConfig, s: &Scaling, from: f64, to: f64) -> ScaledHyperparams {
    let ratio = to / from;
    let pow = |q: crate::Exponent| ratio.powf(q.to_f64());
    let depth = s.depth();
    let grow = pow(s.q_sigma);
    let sigma_a = r.sigma_star_a * grow;
    let sigma_v = r.sigma_star_v * grow;
    let sigma_w = r.sigma_star_w;
    let opt = s.optimizer;
    ScaledHyperparams {
        sigma: (sigma_a * sigma_v.powi(depth as i32) * sigma_w).powf(1.0 / (depth as f64 + 1.0)),
        sigma_a,
        sigma_v,
        sigma_w,
        eta_hat_a: hat_rate(r.eta_star_a, r.sigma_star_a, opt) * pow(s.qt_a),
        eta_hat_v: s.qt_v.iter().map(|&q| hat_rate(r.eta_star_v, r.sigma_star_v, opt) * pow(q)).collect(),
        eta_hat_w: hat_rate(r.eta_star_w, r.sigma_star_w, opt) * pow(s.qt_w),
        optimizer: opt,
    }
}

/// `theta -= eta_hat * g` per group. Returns false if any weight became
/// non-finite.
pub fn gd_step(net: &mut NetState, grads: &Params, hp: &ScaledHyperparams) -> bool {
    let p = &mut net.params;
    p.a.scaled_add(-hp.eta_hat_a, &grads.a);
    for ((v, g), &eta) in p.v.iter_mut().zip(&grads.v).zip(&hp.eta_hat_v) {
        v.scaled_add(-eta, g);
    }
    p.w.scaled_add(-hp.eta_hat_w, &grads.w);
    p.is_finite()
}

/// RMSProp with an undamped running sum of squares:
/// `acc = beta acc + g^2`, `theta -= eta_hat g / sqrt(acc + eps)`.
pub fn rmsprop_step(
    net: &mut NetState,
    grads: &Params,
    accum: &mut Params,
    hp: &ScaledHyperparams,
    beta: f64,
    eps: f64,
) -> bool {
    fn update<D: ndarray::Dimension>(
        theta: &mut ndarray::Array<f64, D>,
        acc: &mut ndarray::Array<f64, D>,
        g: &ndarray::Array<f64, D>,
        eta: f64,
        beta: f64,
        eps: f64,
    ) {
        ndarray::Zip::from(theta).and(acc).and(g).for_each(|t, s, &gi| {
            *s = beta * *s + gi * gi;
            let denom = (*s + eps).sqrt();
            if denom > 0.0 {
                *t -= eta * gi / denom;
            }
        });
    }
    let p = &mut net.params;
    update(&mut p.a, &mut accum.a, &grads.a, hp.eta_hat_a, beta, eps);
    for h in 0..p.v.len() {
        update(&mut p.v[h], &mut accum.v[h], &grads.v[h], hp.eta_hat_v[h], beta, eps);
    }
    update(&mut p.w, &mut accum.w, &grads.w, hp.eta_hat_w, beta, eps);
    p.is_finite()
}

/// Which probes to run and when.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeSchedule {
    /// Steps at which to record probes; empty means none.
    #[serde(default)]
    pub steps: Vec<usize>,
    #[serde(default)]
    pub increments: bool,
    #[serde(default)]
    pub decomposition: bool,
}

impl ProbeSchedule {
    pub fn none() -> Self {
        ProbeSchedule::default()
    }

    /// Increments and decomposition variances at the final step only.
    pub fn final_step(steps: usize) -> Self {
        ProbeSchedule { steps: vec![steps], increments: true, decomposition: true }
    }

    fn wants(&self, k: usize) -> bool {
        (self.increments || self.decomposition) && self.steps.contains(&k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// Mean `|f|` over the test set.
    pub test_mean_abs_f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub increments: Option<IncrementReport>,
    /// `("f", Var f)` followed by every decomposition term variance.
    pub variances: Option<Vec<(String, f64)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub scaling: Scaling,
    pub width: usize,
    pub seed: u64,
    pub steps: Vec<StepRecord>,
    pub probes: Vec<ProbeRecord>,
    pub diverged: bool,
    pub halt_step: Option<usize>,
}

impl TrainRecord {
    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("at least the initial evaluation")
    }
}

pub struct TrainOutcome {
    pub record: TrainRecord,
    pub net: NetState,
}

/// Runs `r.steps` optimizer steps from `net0` and evaluates after each one.
/// A non-finite loss or weight halts the run and marks it diverged. The probe
/// evaluation set is the test set.
pub fn train(
    net0: NetState,
    ds_train: &Dataset,
    ds_test: &Dataset,
    r: &ReferenceConfig,
    s: &Scaling,
    schedule: &ProbeSchedule,
    seed: u64,
) -> Result<TrainOutcome, ProbeError> {
    let kind = LossKind::BinaryCrossEntropy;
    let hp = scale_hyperparams(r, s, net0.width);
    let mut net = net0;
    let mut accum = net.params.zeros_like();
    let n = ds_train.len();
    let bs = r.batch_size.unwrap_or(n).clamp(1, n);
    let per_epoch = n.div_ceil(bs);
    let mut epoch_batches: Vec<Vec<usize>> = Vec::new();

    let mut record = TrainRecord {
        scaling: s.clone(),
        width: net.width,
        seed,
        steps: Vec::with_capacity(r.steps + 1),
        probes: Vec::new(),
        diverged: false,
        halt_step: None,
    };
    for k in 0..=r.steps {
        let (train_loss, _) = evaluate(&net, ds_train, kind);
        let test_f = net.outputs(ds_test.inputs.view());
        let (test_loss, test_acc) = score(test_f.view(), ds_test.labels.view(), kind);
        let test_mean_abs_f = test_f.iter().map(|v| v.abs()).sum::<f64>() / ds_test.len() as f64;
        record.steps.push(StepRecord { step: k, train_loss, test_loss, test_acc, test_mean_abs_f });
        if !(train_loss.is_finite() && test_loss.is_finite()) {
            record.diverged = true;
            record.halt_step = Some(k);
            break;
        }
        if schedule.wants(k) {
            record.probes.push(ProbeRecord {
                step: k,
                increments: schedule.increments.then(|| increment_norms(&net)),
                variances: if schedule.decomposition {
                    Some(decomposition_variances(&net, ds_test.inputs.view())?)
                } else {
                    None
                },
            });
        }
        if k == r.steps {
            break;
        }
        let batch: Vec<usize> = if bs == n {
            (0..n).collect()
        } else {
            if k % per_epoch == 0 {
                epoch_batches = batch_indices(n, bs, seed, (k / per_epoch) as u64);
            }
            epoch_batches[k % per_epoch].clone()
        };
        let g = gradients(&net, ds_train, &batch, kind);
        let finite = match s.optimizer {
            Optimizer::Gd => gd_step(&mut net, &g, &hp),
            Optimizer::RmsProp => rmsprop_step(&mut net, &g, &mut accum, &hp, r.beta, r.eps),
        };
        if !finite {
            record.diverged = true;
            record.halt_step = Some(k + 1);
            break;
        }
    }
    Ok(TrainOutcome { record, net })
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Initializes a width-`width` net with the scales `s` prescribes and trains it.
#[allow(clippy::too_many_arguments)]
pub fn train_at_width(
    ds_train: &Dataset,
    ds_test: &Dataset,
    r: &ReferenceConfig,
    s: &Scaling,
    width: usize,
    alpha: f64,
    dist: InitDist,
    schedule: &ProbeSchedule,
    seed: u64,
) -> Result<TrainOutcome, RunError> {
    let hp = scale_hyperparams(r, s, width);
    let net = init_network(s.depth(), width, ds_train.d0(), alpha, hp.sigma, seed, dist)?;
    Ok(train(net, ds_train, ds_test, r, s, schedule, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponent::q;
    use crate::scaling::{canonical_scaling, CanonicalKind};
    use ndarray::array;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn reference_width_is_identity() {
        let r = ReferenceConfig::new(Optimizer::Gd, 20);
        let s = Scaling::shallow(q(-3, 4), q(1, 2), q(1, 2));
        let hp = scale_hyperparams(&r, &s, r.d_star);
        assert!(close(hp.sigma, r.sigma_star(0)));
        let (ea, _, ew) = hp.raw_etas();
        assert!(close(ea, r.eta_star_a) && close(ew, r.eta_star_w));
    }

    #[test]
    fn ntk_at_four_times_reference() {
        let r = ReferenceConfig::new(Optimizer::Gd, 20);
        let s = canonical_scaling(CanonicalKind::Ntk, 0, Optimizer::Gd);
        let hp = scale_hyperparams(&r, &s, 4 * r.d_star);
        assert!(close(hp.sigma, r.sigma_star(0) / 2.0));
        let (ea, _, ew) = hp.raw_etas();
        assert!(close(ea, r.eta_star_a / 4.0));
        assert!(close(ew, r.eta_star_w));
    }

    #[test]
    fn mf_at_twice_reference() {
        let r = ReferenceConfig::new(Optimizer::Gd, 20);
        let s = canonical_scaling(CanonicalKind::Mf, 0, Optimizer::Gd);
        let base = scale_hyperparams(&r, &s, r.d_star);
        let hp = scale_hyperparams(&r, &s, 2 * r.d_star);
        assert!(close(hp.sigma, r.sigma_star(0) / 2.0));
        assert!(close(hp.eta_hat_a, 2.0 * base.eta_hat_a));
        assert!(close(hp.eta_hat_w, 2.0 * base.eta_hat_w));
    }

    #[test]
    fn rescaling_composes() {
        let r = ReferenceConfig::new(Optimizer::RmsProp, 7);
        let s = Scaling::new(q(-2, 3), q(1, 3), vec![q(5, 4)], q(-1, 2), Optimizer::RmsProp);
        let direct = scale_between(&r, &s, 128.0, 1000.0);
        let mid = scale_between(&r, &s, 128.0, 300.0);
        let via = scale_between(&r, &s, 300.0, 1000.0);
        let ratio = |x: f64, base: f64| x / base;
        let r_star = scale_between(&r, &s, 128.0, 128.0);
        assert!((ratio(direct.eta_hat_a, r_star.eta_hat_a) - ratio(mid.eta_hat_a, r_star.eta_hat_a) * ratio(via.eta_hat_a, r_star.eta_hat_a)).abs() < 1e-12);
        assert!((ratio(direct.sigma, r_star.sigma) - ratio(mid.sigma, r_star.sigma) * ratio(via.sigma, r_star.sigma)).abs() < 1e-12);
        assert!((ratio(direct.eta_hat_v[0], r_star.eta_hat_v[0]) - ratio(mid.eta_hat_v[0], r_star.eta_hat_v[0]) * ratio(via.eta_hat_v[0], r_star.eta_hat_v[0])).abs() < 1e-12);
    }

    fn single(theta: f64) -> NetState {
        NetState::from_params(0.1, 1.0, Params { a: array![theta], v: vec![], w: array![[0.0]] })
    }

    fn hp(eta: f64) -> ScaledHyperparams {
        ScaledHyperparams {
            sigma: 1.0,
            sigma_a: 1.0,
            sigma_v: 1.0,
            sigma_w: 1.0,
            eta_hat_a: eta,
            eta_hat_v: vec![],
            eta_hat_w: eta,
            optimizer: Optimizer::Gd,
        }
    }

    fn grad(g: f64) -> Params {
        Params { a: array![g], v: vec![], w: array![[0.0]] }
    }

    #[test]
    fn gd_step_examples() {
        let mut net = single(1.0);
        assert!(gd_step(&mut net, &grad(0.0), &hp(0.5)));
        assert_eq!(net.params.a[0], 1.0);
        assert!(gd_step(&mut net, &grad(3.0), &hp(0.0)));
        assert_eq!(net.params.a[0], 1.0);
        assert!(gd_step(&mut net, &grad(2.0), &hp(0.1)));
        assert!((net.params.a[0] - 0.8).abs() < 1e-15);
        assert_eq!(net.init_snapshot().a[0], 1.0);
        assert!(!gd_step(&mut net, &grad(f64::INFINITY), &hp(0.1)));
    }

    #[test]
    fn rmsprop_step_examples() {
        let mut net = single(0.0);
        let mut acc = net.params.zeros_like();
        rmsprop_step(&mut net, &grad(4.0), &mut acc, &hp(0.1), 0.99, 0.0);
        assert!((net.params.a[0] + 0.1).abs() < 1e-15);

        let before = net.params.a[0];
        rmsprop_step(&mut net, &grad(0.0), &mut acc, &hp(0.1), 0.99, 0.0);
        assert_eq!(net.params.a[0], before);

        let mut net = single(0.0);
        let mut acc = net.params.zeros_like();
        rmsprop_step(&mut net, &grad(1.0), &mut acc, &hp(0.3), 0.5, 0.0);
        let after_first = net.params.a[0];
        rmsprop_step(&mut net, &grad(1.0), &mut acc, &hp(0.3), 0.5, 0.0);
        assert!((net.params.a[0] - after_first + 0.3 / 1.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rmsprop_first_step_has_size_eta_hat() {
        let net0 = init_network(1, 6, 3, 0.1, 0.5, 1, InitDist::StdNormal).unwrap();
        let ds = crate::dataset::gen_synthetic(10, 3, 2.0, 0).unwrap();
        let g = gradients(&net0, &ds, &(0..10).collect::<Vec<_>>(), LossKind::BinaryCrossEntropy);
        let mut net = net0.clone();
        let mut acc = net.params.zeros_like();
        let h = ScaledHyperparams { eta_hat_v: vec![0.02], ..hp(0.05) };
        rmsprop_step(&mut net, &g, &mut acc, &h, 0.9, 0.0);
        let inc = net.increments();
        for (d, gi) in inc.a.iter().zip(&g.a) {
            if *gi != 0.0 {
                assert!((d.abs() - 0.05).abs() < 1e-15);
            }
        }
        for (d, gi) in inc.v[0].iter().zip(&g.v[0]) {
            if *gi != 0.0 {
                assert!((d.abs() - 0.02).abs() < 1e-15);
            }
        }
    }

    fn small_run(r: &ReferenceConfig) -> TrainRecord {
        let (tr, te) = crate::dataset::synthetic_split(32, 16, 4, 2.0, 3).unwrap();
        let s = canonical_scaling(CanonicalKind::Mf, 0, Optimizer::Gd);
        let hp = scale_hyperparams(r, &s, 16);
        let net = init_network(0, 16, 4, 0.1, hp.sigma, 5, InitDist::StdNormal).unwrap();
        train(net, &tr, &te, r, &s, &ProbeSchedule::final_step(r.steps), 5).unwrap().record
    }

    #[test]
    fn zero_steps_records_initial_evaluation() {
        let r = ReferenceConfig::new(Optimizer::Gd, 4).with_steps(0);
        let rec = small_run(&r);
        assert_eq!(rec.steps.len(), 1);
        assert_eq!(rec.probes.len(), 1);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let r = ReferenceConfig::new(Optimizer::Gd, 4).with_eta(0.0).with_steps(5);
        let rec = small_run(&r);
        assert!(rec.steps.iter().all(|s| s.train_loss == rec.steps[0].train_loss));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let r = ReferenceConfig::new(Optimizer::Gd, 4).with_steps(20);
        let a = small_run(&r);
        let b = small_run(&r);
        assert_eq!(a, b);
        assert!(a.last().train_loss < a.steps[0].train_loss);
        assert!(!a.diverged);
        assert_eq!(a.steps.len(), 21);
    }

    #[test]
    fn minibatch_runs_cover_steps() {
        let mut r = ReferenceConfig::new(Optimizer::Gd, 4).with_steps(7);
        r.batch_size = Some(10);
        let rec = small_run(&r);
        assert_eq!(rec.steps.len(), 8);
    }

    #[test]
    fn huge_rate_halts_as_diverged() {
        let r = ReferenceConfig::new(Optimizer::Gd, 4).with_eta(1e200).with_steps(10);
        let rec = small_run(&r);
        assert!(rec.diverged);
        assert!(rec.halt_step.is_some());
        assert!(rec.steps.len() <= 11);
    }
}
