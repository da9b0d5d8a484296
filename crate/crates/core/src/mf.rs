//! Discrete-time mean-field machinery for one hidden layer.
//!
//! A width-`d` net at the mean-field scaling is a uniform measure over its
//! `d` atoms `(a_r, w_r)`, and one GD step maps that measure through a
//! width-independent transition operator. This module implements that
//! operator, exact Wasserstein-2 distances between equal-size empirical
//! measures, and the kernel-driven function-space dynamics.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Zip};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::net::{dloss, dphi, phi, LossKind, NetState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MfError {
    #[error("measures are only defined for one hidden layer, got H = {0}")]
    NotShallow(usize),
    #[error("atom counts differ: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("atom dimensions differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("measure has no atoms")]
    Empty,
    #[error("kernel shapes do not match: {0}")]
    Shape(String),
}

/// Uniform empirical measure; row `r` is `(a_r, w_r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleMeasure {
    pub atoms: Array2<f64>,
}

impl ParticleMeasure {
    pub fn new(atoms: Array2<f64>) -> Result<Self, MfError> {
        if atoms.nrows() == 0 {
            return Err(MfError::Empty);
        }
        Ok(ParticleMeasure { atoms })
    }

    pub fn len(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.nrows() == 0
    }

    pub fn a(&self) -> ArrayView1<'_, f64> {
        self.atoms.column(0)
    }

    pub fn w(&self) -> ArrayView2<'_, f64> {
        self.atoms.slice(s![.., 1..])
    }

    /// The first `d` atoms.
    pub fn leading(&self, d: usize) -> ParticleMeasure {
        ParticleMeasure { atoms: self.atoms.slice(s![..d.min(self.len()), ..]).to_owned() }
    }

    /// `sigma * mean_r a_r phi(w_r . x)` for every row of `x`.
    pub fn outputs(&self, sigma: f64, alpha: f64, x: ArrayView2<'_, f64>) -> Array1<f64> {
        let z = x.dot(&self.w().t());
        z.mapv(|v| phi(v, alpha)).dot(&self.a()) * (sigma / self.len() as f64)
    }
}

pub fn measure_of(net: &NetState) -> Result<ParticleMeasure, MfError> {
    if net.depth != 0 {
        return Err(MfError::NotShallow(net.depth));
    }
    let mut atoms = Array2::zeros((net.width, 1 + net.d0));
    atoms.column_mut(0).assign(&net.params.a);
    atoms.slice_mut(s![.., 1..]).assign(&net.params.w);
    ParticleMeasure::new(atoms)
}

/// One full-batch GD step applied to every atom:
/// `a -= eta sigma E[l' phi(w.x)]`, `w -= eta sigma E[l' a phi'(w.x) x]`,
/// with `l'` evaluated at `f = sigma * mean_r a_r phi(w_r.x)`.
pub fn transition_step(
    mu: &ParticleMeasure,
    eta_star: f64,
    sigma_star: f64,
    alpha: f64,
    ds: &Dataset,
    kind: LossKind,
) -> ParticleMeasure {
    let x = ds.inputs.view();
    let n = ds.len() as f64;
    let a = mu.a();
    let z = x.dot(&mu.w().t());
    let act = z.mapv(|v| phi(v, alpha));
    let f = act.dot(&a) * (sigma_star / mu.len() as f64);
    let g: Array1<f64> = Zip::from(&f).and(&ds.labels).map_collect(|&fi, &y| dloss(kind, y, fi));
    let step = eta_star * sigma_star / n;

    let da = act.t().dot(&g) * step;
    let mut back = Array2::from_shape_fn(z.dim(), |(i, r)| g[i] * a[r]);
    Zip::from(&mut back).and(&z).for_each(|b, &zi| *b *= dphi(zi, alpha));
    let dw = back.t().dot(&x) * step;

    let mut atoms = mu.atoms.clone();
    atoms.column_mut(0).scaled_add(-1.0, &da);
    atoms.slice_mut(s![.., 1..]).scaled_add(-1.0, &dw);
    ParticleMeasure { atoms }
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with row and column potentials, `O(n^3)`.
/// Returns `assignment[row] = column` and the total cost.
pub fn min_cost_assignment(cost: ArrayView2<'_, f64>) -> (Vec<usize>, f64) {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays with a virtual column 0, as in the standard formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = cost.row(i0 - 1);
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    (assignment, total)
}

/// Pairwise squared distances computed as sums of squared differences, so the
/// matrix for `(b, a)` is exactly the transpose of the one for `(a, b)`.
fn squared_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        Zip::from(a.row(i)).and(b.row(j)).fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y))
    })
}

/// Exact W2 between two uniform measures with the same number of atoms.
pub fn wasserstein2(mu_a: &ParticleMeasure, mu_b: &ParticleMeasure) -> Result<f64, MfError> {
    if mu_a.len() != mu_b.len() {
        return Err(MfError::CountMismatch(mu_a.len(), mu_b.len()));
    }
    if mu_a.atoms.ncols() != mu_b.atoms.ncols() {
        return Err(MfError::DimMismatch(mu_a.atoms.ncols(), mu_b.atoms.ncols()));
    }
    let cost = squared_distances(mu_a.atoms.view(), mu_b.atoms.view());
    let (perm, _) = min_cost_assignment(cost.view());
    // Summing matched costs in sorted order makes the value independent of
    // argument order.
    let mut matched: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| cost[[i, j]]).collect();
    matched.sort_by(f64::total_cmp);
    let total: f64 = matched.iter().sum();
    Ok((total / mu_a.len() as f64).sqrt())
}

/// Iterates `f(x') -= mean_i l'(y_i, f(x_i)) K(x_i, x')` for `steps` steps.
///
/// `init_f` holds values on the `n` train points followed by any query points;
/// `gram` is `n x init_f.len()` with rows indexed by train points. Returns the
/// trajectory including the initial values.
pub fn kernel_dynamics(
    init_f: ArrayView1<'_, f64>,
    gram: ArrayView2<'_, f64>,
    labels: ArrayView1<'_, f64>,
    kind: LossKind,
    steps: usize,
) -> Result<Vec<Array1<f64>>, MfError> {
    let n = labels.len();
    if gram.nrows() != n || gram.ncols() != init_f.len() || init_f.len() < n {
        return Err(MfError::Shape(format!(
            "gram {:?}, {} values, {} labels",
            gram.dim(),
            init_f.len(),
            n
        )));
    }
    let mut traj = vec![init_f.to_owned()];
    for _ in 0..steps {
        let cur = traj.last().expect("nonempty");
        let g: Array1<f64> = (0..n).map(|i| dloss(kind, labels[i], cur[i])).collect();
        let next = cur - &(gram.t().dot(&g) / n as f64);
        traj.push(next);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_network, InitDist, Params};
    use crate::trainer::{gd_step, ScaledHyperparams};
    use crate::scaling::Optimizer;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn measure(rows: Vec<Vec<f64>>) -> ParticleMeasure {
        let d = rows.len();
        let k = rows[0].len();
        ParticleMeasure::new(Array2::from_shape_vec((d, k), rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn measure_copies_weights() {
        let p = Params { a: array![1.0, -2.0], v: vec![], w: array![[0.5, 0.1], [3.0, 4.0]] };
        let net = NetState::from_params(0.1, 1.0, p);
        let mu = measure_of(&net).unwrap();
        assert_eq!(mu.atoms, array![[1.0, 0.5, 0.1], [-2.0, 3.0, 4.0]]);
        let deep = init_network(1, 2, 2, 0.1, 1.0, 0, InitDist::StdNormal).unwrap();
        assert_eq!(measure_of(&deep), Err(MfError::NotShallow(1)));
    }

    #[test]
    fn permuted_units_give_the_same_measure() {
        let mu = measure(vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![-1.0, 0.0]]);
        let nu = measure(vec![vec![-1.0, 0.0], vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(wasserstein2(&mu, &nu).unwrap(), 0.0);
    }

    #[test]
    fn zero_rate_is_identity() {
        let ds = crate::dataset::gen_synthetic(8, 2, 1.0, 0).unwrap();
        let mu = measure(vec![vec![0.3, 1.0, -1.0], vec![-0.7, 0.2, 0.5]]);
        let out = transition_step(&mu, 0.0, 1.0, 0.1, &ds, LossKind::BinaryCrossEntropy);
        assert_eq!(out, mu);
    }

    #[test]
    fn single_atom_hand_step() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let ds = Dataset::new("t", x, array![1.0, 0.0]).unwrap().subset(&[0]);
        let mu = measure(vec![vec![0.0, 1.0, 0.0]]);
        let (eta, sigma) = (0.3, 0.7);
        let out = transition_step(&mu, eta, sigma, 0.1, &ds, LossKind::BinaryCrossEntropy);
        assert!((out.atoms[[0, 0]] - eta * sigma / 2.0).abs() < 1e-15);
        assert_eq!(out.atoms.slice(s![0, 1..]), array![1.0, 0.0]);
    }

    #[test]
    fn transition_commutes_with_mf_scaled_gd() {
        let ds = crate::dataset::gen_synthetic(24, 3, 2.0, 1).unwrap();
        let (eta_star, sigma_star) = (0.05, 0.9);
        for d in [1usize, 2, 8, 64] {
            let net = init_network(0, d, 3, 0.1, sigma_star / d as f64, d as u64, InitDist::SymmetricUniform).unwrap();
            let hp = ScaledHyperparams {
                sigma: net.sigma,
                sigma_a: net.sigma,
                sigma_v: 1.0,
                sigma_w: 1.0,
                eta_hat_a: eta_star * d as f64,
                eta_hat_v: vec![],
                eta_hat_w: eta_star * d as f64,
                optimizer: Optimizer::Gd,
            };
            let mut stepped = net.clone();
            let g = crate::net::gradients(&net, &ds, &(0..ds.len()).collect::<Vec<_>>(), LossKind::BinaryCrossEntropy);
            gd_step(&mut stepped, &g, &hp);
            let via_net = measure_of(&stepped).unwrap();
            let via_t = transition_step(&measure_of(&net).unwrap(), eta_star, sigma_star, 0.1, &ds, LossKind::BinaryCrossEntropy);
            let diff = (&via_net.atoms - &via_t.atoms).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff <= 1e-12, "d = {d}: {diff}");
        }
    }

    #[test]
    fn w2_examples() {
        let mu = measure(vec![vec![0.0, 1.0], vec![2.0, 2.0]]);
        assert_eq!(wasserstein2(&mu, &mu).unwrap(), 0.0);
        let p = measure(vec![vec![0.0, 0.0]]);
        let q = measure(vec![vec![3.0, 4.0]]);
        assert!((wasserstein2(&p, &q).unwrap() - 5.0).abs() < 1e-12);
        let a = measure(vec![vec![0.0], vec![2.0]]);
        let b = measure(vec![vec![1.0], vec![3.0]]);
        assert!((wasserstein2(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(wasserstein2(&a, &p), Err(MfError::CountMismatch(2, 1)));
    }

    fn brute_force(cost: &Array2<f64>) -> f64 {
        fn rec(cost: &Array2<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.nrows() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[[row, j]] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.ncols()])
    }

    fn random_measure(rng: &mut ChaCha8Rng, d: usize, k: usize) -> ParticleMeasure {
        ParticleMeasure::new(Array2::from_shape_simple_fn((d, k), || rng.random_range(-2.0..2.0))).unwrap()
    }

    #[test]
    fn w2_is_a_metric_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let (x, y, z) = (random_measure(&mut rng, 8, 3), random_measure(&mut rng, 8, 3), random_measure(&mut rng, 8, 3));
            let xy = wasserstein2(&x, &y).unwrap();
            assert_eq!(xy, wasserstein2(&y, &x).unwrap());
            let bound = xy + wasserstein2(&y, &z).unwrap();
            assert!(wasserstein2(&x, &z).unwrap() <= bound + 1e-9);
        }
    }

    #[test]
    fn kernel_dynamics_examples() {
        let f0 = array![0.0, 0.5];
        let gram = array![[2.0, 1.0]];
        let y = array![1.0];
        let traj = kernel_dynamics(f0.view(), gram.view(), y.view(), LossKind::BinaryCrossEntropy, 0).unwrap();
        assert_eq!(traj, vec![f0.clone()]);
        let traj = kernel_dynamics(f0.view(), gram.view(), y.view(), LossKind::BinaryCrossEntropy, 1).unwrap();
        assert!((traj[1][0] - 1.0).abs() < 1e-15);
        assert!((traj[1][1] - 1.0).abs() < 1e-15);
        let zero = Array2::<f64>::zeros((1, 2));
        let flat = kernel_dynamics(f0.view(), zero.view(), y.view(), LossKind::BinaryCrossEntropy, 5).unwrap();
        assert!(flat.iter().all(|f| *f == f0));
        assert!(kernel_dynamics(f0.view(), gram.t(), y.view(), LossKind::BinaryCrossEntropy, 1).is_err());
    }

    proptest! {
        #[test]
        fn assignment_matches_brute_force(seed in any::<u64>(), n in 1usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = Array2::from_shape_simple_fn((n, n), || rng.random_range(0.0..10.0));
            let (perm, total) = min_cost_assignment(cost.view());
            let mut seen = perm.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
            prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
        }
    }
}
