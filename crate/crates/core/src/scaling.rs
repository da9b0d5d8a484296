//! Symbolic width-exponent calculus.
//!
//! A [`Scaling`] fixes how the initialization scale and the scaled learning
//! rates move with the width `d`. From it we derive the exponents of the weight
//! increments after each step, the exponents of the four output decomposition
//! terms, and a classification of the resulting infinite-width limit.
//!
//! For one hidden layer (`H = 0`) the increment recursion is exact. For deeper
//! nets only upper bounds are available, and classification uses nothing but
//! their signs.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exponent::Exponent;

/// Default iteration horizon for telling fixed points from growth.
pub const DEFAULT_K_MAX: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    RmsProp,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Gd => "gd",
            Optimizer::RmsProp => "rmsprop",
        })
    }
}

impl FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gd" => Ok(Optimizer::Gd),
            "rmsprop" => Ok(Optimizer::RmsProp),
            other => Err(format!("unknown optimizer {other:?} (expected gd or rmsprop)")),
        }
    }
}

/// Exponents `(q_sigma, qt_a, qt_v[..], qt_w)` plus the optimizer.
///
/// The depth `H` is `qt_v.len()`; `H = 0` is the single-hidden-layer net.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scaling {
    pub q_sigma: Exponent,
    pub qt_a: Exponent,
    #[serde(default)]
    pub qt_v: Vec<Exponent>,
    pub qt_w: Exponent,
    pub optimizer: Optimizer,
}

impl Scaling {
    pub fn new(
        q_sigma: Exponent,
        qt_a: Exponent,
        qt_v: Vec<Exponent>,
        qt_w: Exponent,
        optimizer: Optimizer,
    ) -> Self {
        Scaling { q_sigma, qt_a, qt_v, qt_w, optimizer }
    }

    /// Single-hidden-layer GD scaling.
    pub fn shallow(q_sigma: Exponent, qt_a: Exponent, qt_w: Exponent) -> Self {
        Scaling::new(q_sigma, qt_a, Vec::new(), qt_w, Optimizer::Gd)
    }

    pub fn depth(&self) -> usize {
        self.qt_v.len()
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q_sigma={} qt_a={} qt_v=[", self.q_sigma, self.qt_a)?;
        for (i, q) in self.qt_v.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{q}")?;
        }
        write!(f, "] qt_w={} {}", self.qt_w, self.optimizer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Exactness {
    Exact,
    UpperBound,
}

/// Increment exponents after `step` optimizer steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExponentState {
    pub step: u32,
    pub q_a: Exponent,
    pub q_v: Vec<Exponent>,
    pub q_w: Exponent,
    pub exactness: Exactness,
}

impl ExponentState {
    fn same_exponents(&self, other: &ExponentState) -> bool {
        self.q_a == other.q_a && self.q_w == other.q_w && self.q_v == other.q_v
    }

    fn all(&self) -> impl Iterator<Item = Exponent> + '_ {
        [self.q_a, self.q_w].into_iter().chain(self.q_v.iter().copied())
    }

    fn max_v(&self) -> Option<Exponent> {
        self.q_v.iter().copied().max()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CalculusError {
    #[error("operation requires a GD scaling; RMSProp increments follow a different law")]
    RequiresGd,
    #[error("operation requires an RMSProp scaling")]
    RequiresRmsProp,
    #[error("operation is only defined for one hidden layer (got H = {0})")]
    RequiresShallow(usize),
}

/// The four output decomposition terms of the single-hidden-layer net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Empty,
    A,
    W,
    Aw,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Empty, Term::A, Term::W, Term::Aw];

    pub fn name(self) -> &'static str {
        match self {
            Term::Empty => "empty",
            Term::A => "a",
            Term::W => "w",
            Term::Aw => "aw",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names of the parameter groups in the order `[a, v1, .., vH, w]`.
pub fn group_names(depth: usize) -> Vec<String> {
    let mut names = vec!["a".to_string()];
    names.extend((1..=depth).map(|h| format!("v{h}")));
    names.push("w".to_string());
    names
}

/// Label of the decomposition term whose increment groups are the set bits of
/// `mask` (bit `i` is group `i` of [`group_names`]). The empty set is "empty".
pub fn subset_label(depth: usize, mask: usize) -> String {
    if mask == 0 {
        return "empty".to_string();
    }
    group_names(depth)
        .into_iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, n)| n)
        .collect()
}

/// Sign pattern of the first-step exponents `(q_a, q_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KappaCase {
    BothNeg,
    BothZero,
    AZeroWNeg,
    WZeroANeg,
    APosSumNonpos,
    WPosSumNonpos,
    SumPos,
}

impl KappaCase {
    pub fn of(q_a1: Exponent, q_w1: Exponent) -> KappaCase {
        let zero = Exponent::zero();
        let sum = q_a1 + q_w1;
        if sum > zero {
            KappaCase::SumPos
        } else if q_a1 > zero {
            KappaCase::APosSumNonpos
        } else if q_w1 > zero {
            KappaCase::WPosSumNonpos
        } else if q_a1.is_zero() && q_w1.is_zero() {
            KappaCase::BothZero
        } else if q_a1.is_zero() {
            KappaCase::AZeroWNeg
        } else if q_w1.is_zero() {
            KappaCase::WZeroANeg
        } else {
            KappaCase::BothNeg
        }
    }
}

/// Exponents of the width sums in each decomposition term: `1/2` when the
/// summands stay independent, `1` when they correlate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KappaAssignment {
    pub kappa_empty: Exponent,
    pub kappa_a: Exponent,
    pub kappa_w: Exponent,
    pub kappa_aw: Exponent,
    pub case_tag: KappaCase,
    /// Terms whose kappa is only known to be at most 1; reported as 1.
    pub bound_only: BTreeSet<Term>,
}

impl KappaAssignment {
    pub fn get(&self, term: Term) -> Exponent {
        match term {
            Term::Empty => self.kappa_empty,
            Term::A => self.kappa_a,
            Term::W => self.kappa_w,
            Term::Aw => self.kappa_aw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionExponents {
    pub step: u32,
    pub qf_empty: Exponent,
    pub qf_a: Exponent,
    pub qf_w: Exponent,
    pub qf_aw: Exponent,
}

impl DecompositionExponents {
    pub fn get(&self, term: Term) -> Exponent {
        match term {
            Term::Empty => self.qf_empty,
            Term::A => self.qf_a,
            Term::W => self.qf_w,
            Term::Aw => self.qf_aw,
        }
    }

    pub fn max(&self) -> Exponent {
        Term::ALL.iter().map(|&t| self.get(t)).max().expect("four terms")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassKind {
    #[serde(rename = "NTK")]
    Ntk,
    MeanField,
    Intermediate,
    OutputOnly,
    InputOnly,
    OutputPlusCross,
    Divergent,
    TrivialVanishing,
    NotProvablyTrivial,
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ClassKind::Ntk => "NTK",
            ClassKind::MeanField => "MeanField",
            ClassKind::Intermediate => "Intermediate",
            ClassKind::OutputOnly => "OutputOnly",
            ClassKind::InputOnly => "InputOnly",
            ClassKind::OutputPlusCross => "OutputPlusCross",
            ClassKind::Divergent => "Divergent",
            ClassKind::TrivialVanishing => "TrivialVanishing",
            ClassKind::NotProvablyTrivial => "NotProvablyTrivial",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingClass {
    pub class: ClassKind,
    pub surviving_terms: BTreeSet<Term>,
    pub notes: String,
}

/// Upper bound on the exponent of one multi-layer decomposition term.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermBound {
    pub term: String,
    pub bound: Exponent,
}

/// Everything `classify_scaling` looked at, for reporting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub class: ClassKind,
    pub surviving_terms: BTreeSet<Term>,
    pub exponent_table: Vec<ExponentState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kappa: Option<KappaAssignment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decomposition: Option<DecompositionExponents>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub term_bounds: Vec<TermBound>,
    pub notes: String,
}

impl ScalingReport {
    pub fn to_class(&self) -> ScalingClass {
        ScalingClass {
            class: self.class,
            surviving_terms: self.surviving_terms.clone(),
            notes: self.notes.clone(),
        }
    }
}

fn half_of(n: i64) -> Exponent {
    Exponent::new(n, 2)
}

/// Increment exponents after the first GD step.
pub fn first_step_exponents(s: &Scaling) -> Result<ExponentState, CalculusError> {
    if s.optimizer != Optimizer::Gd {
        return Err(CalculusError::RequiresGd);
    }
    let h = s.depth() as i64;
    let sigma_part = s.q_sigma * (h + 1);
    Ok(ExponentState {
        step: 1,
        q_a: s.qt_a + sigma_part + half_of(h),
        q_v: s.qt_v.iter().map(|&qt| qt + sigma_part + half_of(h - 1)).collect(),
        q_w: s.qt_w + sigma_part + half_of(h),
        exactness: if h == 0 { Exactness::Exact } else { Exactness::UpperBound },
    })
}

/// RMSProp normalizes gradients elementwise, so every increment scales like
/// its scaled learning rate at every step.
pub fn rmsprop_increment_exponents(s: &Scaling) -> Result<ExponentState, CalculusError> {
    if s.optimizer != Optimizer::RmsProp {
        return Err(CalculusError::RequiresRmsProp);
    }
    Ok(ExponentState {
        step: 1,
        q_a: s.qt_a,
        q_v: s.qt_v.clone(),
        q_w: s.qt_w,
        exactness: Exactness::Exact,
    })
}

/// Advance the increment exponents by one step.
///
/// For `H = 0` this is the exact recursion
/// `q_a' = max(q_a, q_a1 + max(0, q_w))` and symmetrically for `w`. For
/// `H >= 1` it is the max-bound recursion, where the largest per-layer `q_v`
/// stands in for the hidden layers inside the inner maxima.
pub fn step_exponents(state: &ExponentState, first: &ExponentState, s: &Scaling) -> ExponentState {
    if s.optimizer == Optimizer::RmsProp {
        return ExponentState { step: state.step + 1, ..state.clone() };
    }
    let zero = Exponent::zero();
    let h = s.depth() as i64;
    if h == 0 {
        return ExponentState {
            step: state.step + 1,
            q_a: state.q_a.max(first.q_a + zero.max(state.q_w)),
            q_v: Vec::new(),
            q_w: state.q_w.max(first.q_w + zero.max(state.q_a)),
            exactness: Exactness::Exact,
        };
    }

    let sigma_part = s.q_sigma * (h + 1);
    let (qa, qw) = (state.q_a, state.q_w);
    let qv = state.max_v().expect("H >= 1 has hidden layers");
    let hh = Exponent::integer(h);
    let hm1 = Exponent::integer(h - 1);

    let outer = |q_self: Exponent, q_other: Exponent| {
        [
            half_of(h),
            half_of(h + 1) + q_other,
            half_of(h + 1) + qv,
            hh + q_other + qv,
            hh + qv * 2,
        ]
        .into_iter()
        .max()
        .expect("nonempty")
            + sigma_part
            + q_self
    };
    let inner = [
        half_of(h - 1),
        half_of(h) + qa,
        half_of(h) + qw,
        half_of(h) + qv,
        hm1 + qa + qw,
        hm1 + qw + qv,
        hm1 + qa + qv,
    ]
    .into_iter()
    .max()
    .expect("nonempty")
        + sigma_part;

    ExponentState {
        step: state.step + 1,
        q_a: qa.max(outer(s.qt_a, qw)),
        q_v: state
            .q_v
            .iter()
            .zip(&s.qt_v)
            .map(|(&q, &qt)| q.max(qt + inner))
            .collect(),
        q_w: qw.max(outer(s.qt_w, qa)),
        exactness: Exactness::UpperBound,
    }
}

/// Kappa exponents for the single-hidden-layer decomposition at step `k`.
///
/// Values the analysis only bounds by 1 are reported as 1 and listed in
/// `bound_only`. In the both-negative case the cross term picks up a coherent
/// second-order piece, which gives `kappa_aw = 1 + max(q_a1, q_w1)` clamped to
/// `[1/2, 1]`.
pub fn kappa_terms(
    first: &ExponentState,
    state_k: &ExponentState,
) -> Result<KappaAssignment, CalculusError> {
    if !first.q_v.is_empty() || !state_k.q_v.is_empty() {
        return Err(CalculusError::RequiresShallow(first.q_v.len().max(state_k.q_v.len())));
    }
    let one = Exponent::one();
    let half = Exponent::half();
    let (qa1, qw1) = (first.q_a, first.q_w);
    let case = KappaCase::of(qa1, qw1);
    let unresolved = |ts: &[Term]| ts.iter().copied().collect::<BTreeSet<_>>();

    let (kappa_empty, kappa_a, kappa_w, kappa_aw, bound_only) = match case {
        KappaCase::BothNeg => {
            let aw = (one + qa1.max(qw1)).clamp_to(half, one);
            (half, one, one, aw, BTreeSet::new())
        }
        KappaCase::BothZero => (one, one, one, one, BTreeSet::new()),
        KappaCase::AZeroWNeg => (half, one, one, one, unresolved(&[Term::W, Term::Aw])),
        KappaCase::WZeroANeg => (one, one, one, one, unresolved(&[Term::A, Term::Aw])),
        KappaCase::APosSumNonpos => {
            let mut b = unresolved(&[Term::Empty, Term::W]);
            if !(qa1 + qw1).is_zero() {
                b.insert(Term::Aw);
            }
            (one, one, one, one, b)
        }
        KappaCase::WPosSumNonpos => {
            let mut b = unresolved(&[Term::Empty, Term::A]);
            if !(qa1 + qw1).is_zero() {
                b.insert(Term::Aw);
            }
            (one, one, one, one, b)
        }
        KappaCase::SumPos => (one, one, one, one, Term::ALL.into_iter().collect()),
    };
    Ok(KappaAssignment { kappa_empty, kappa_a, kappa_w, kappa_aw, case_tag: case, bound_only })
}

pub fn decomposition_exponents(
    s: &Scaling,
    state: &ExponentState,
    kappa: &KappaAssignment,
) -> Result<DecompositionExponents, CalculusError> {
    if s.depth() > 0 {
        return Err(CalculusError::RequiresShallow(s.depth()));
    }
    let qs = s.q_sigma;
    Ok(DecompositionExponents {
        step: state.step,
        qf_empty: qs + kappa.kappa_empty,
        qf_a: state.q_a + qs + kappa.kappa_a,
        qf_w: state.q_w + qs + kappa.kappa_w,
        qf_aw: state.q_a + state.q_w + qs + kappa.kappa_aw,
    })
}

/// The model neither vanishes nor blows up, and it still moves away from its
/// initialization.
pub fn check_nontrivial(d: &DecompositionExponents, q_w_k: Exponent) -> bool {
    let zero = Exponent::zero();
    let finite_nonvanishing = d.max() == zero;
    let evolves = d.qf_a.max(d.qf_w).max(d.qf_aw) == zero
        || (d.qf_empty == zero && q_w_k >= zero);
    finite_nonvanishing && evolves
}

/// Exponent states for `k = 1..` until a fixed point repeats or `k_max`.
/// The boolean is true when exponents still grew at the last step.
pub fn exponent_trajectory(
    s: &Scaling,
    k_max: u32,
) -> (Vec<ExponentState>, bool) {
    let k_max = k_max.max(2);
    let first = match s.optimizer {
        Optimizer::Gd => first_step_exponents(s),
        Optimizer::RmsProp => rmsprop_increment_exponents(s),
    }
    .expect("optimizer matched");
    let mut table = vec![first.clone()];
    while table.len() < k_max as usize {
        let last = table.last().expect("nonempty");
        let next = step_exponents(last, &first, s);
        let fixed = next.same_exponents(last);
        table.push(next);
        if fixed {
            return (table, false);
        }
    }
    (table, true)
}

/// Exponent bounds for every multi-layer decomposition subset: the pure
/// initialization term scales as `(H+1)(q_sigma + 1/2)`, and a term carrying
/// the increments of groups `Theta` is at most `(H+1)(q_sigma + 1) + sum q`.
pub fn multilayer_term_bounds(s: &Scaling, state: &ExponentState) -> Vec<TermBound> {
    let h = s.depth();
    let groups: Vec<Exponent> = std::iter::once(state.q_a)
        .chain(state.q_v.iter().copied())
        .chain(std::iter::once(state.q_w))
        .collect();
    let n = h as i64 + 1;
    (0..1usize << groups.len())
        .map(|mask| {
            let bound = if mask == 0 {
                (s.q_sigma + Exponent::half()) * n
            } else {
                (s.q_sigma + Exponent::one()) * n
                    + groups
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask & (1 << i) != 0)
                        .map(|(_, &q)| q)
                        .sum::<Exponent>()
            };
            TermBound { term: subset_label(h, mask), bound }
        })
        .collect()
}

pub fn classify_scaling(s: &Scaling, k_max: u32) -> ScalingClass {
    analyze_scaling(s, k_max).to_class()
}

/// Classify a scaling and keep the intermediate tables.
pub fn analyze_scaling(s: &Scaling, k_max: u32) -> ScalingReport {
    if s.depth() == 0 {
        analyze_shallow(s, k_max)
    } else {
        analyze_deep(s, k_max)
    }
}

fn analyze_shallow(s: &Scaling, k_max: u32) -> ScalingReport {
    let (table, growing) = exponent_trajectory(s, k_max);
    let first = &table[0];
    let last = table.last().expect("nonempty");
    let kappa = kappa_terms(first, last).expect("shallow");
    let dec = decomposition_exponents(s, last, &kappa).expect("shallow");
    let mut notes = Vec::new();
    if s.optimizer == Optimizer::RmsProp {
        notes.push("kappa cases follow the GD sign rules applied to the RMSProp increment exponents".to_string());
    }

    let mut report = ScalingReport {
        class: ClassKind::Divergent,
        surviving_terms: BTreeSet::new(),
        exponent_table: table.clone(),
        kappa: Some(kappa.clone()),
        decomposition: Some(dec.clone()),
        term_bounds: Vec::new(),
        notes: String::new(),
    };
    let finish = |mut r: ScalingReport, class: ClassKind, mut notes: Vec<String>, extra: &str| {
        if !extra.is_empty() {
            notes.push(extra.to_string());
        }
        r.class = class;
        r.notes = notes.join("; ");
        r
    };

    if growing || kappa.case_tag == KappaCase::SumPos {
        return finish(
            report,
            ClassKind::Divergent,
            notes,
            "increment exponents grow without bound in k; saturation of the loss gradient is not modelled, so the limit may still stall rather than blow up",
        );
    }
    let zero = Exponent::zero();
    let top = dec.max();
    if top > zero {
        return finish(report, ClassKind::Divergent, notes, "a decomposition term diverges with d");
    }
    if top < zero {
        return finish(report, ClassKind::TrivialVanishing, notes, "every decomposition term vanishes with d");
    }
    report.surviving_terms = Term::ALL.into_iter().filter(|&t| dec.get(t) == zero).collect();
    if !check_nontrivial(&dec, last.q_w) {
        return finish(
            report,
            ClassKind::TrivialVanishing,
            notes,
            "the output stays finite but no increment term survives, so the limit is frozen at initialization",
        );
    }
    let sum = first.q_a + first.q_w;
    let class = match kappa.case_tag {
        KappaCase::BothNeg if s.q_sigma == Exponent::new(-1, 2) => ClassKind::Ntk,
        KappaCase::BothNeg => ClassKind::Intermediate,
        KappaCase::BothZero => ClassKind::MeanField,
        KappaCase::AZeroWNeg => ClassKind::OutputOnly,
        KappaCase::WZeroANeg => ClassKind::InputOnly,
        KappaCase::APosSumNonpos if sum.is_negative() => ClassKind::OutputOnly,
        KappaCase::APosSumNonpos => ClassKind::OutputPlusCross,
        KappaCase::WPosSumNonpos if sum.is_negative() => ClassKind::InputOnly,
        KappaCase::WPosSumNonpos => {
            notes.push("mirror image of the output-plus-cross case with the roles of a and w swapped".to_string());
            ClassKind::OutputPlusCross
        }
        KappaCase::SumPos => unreachable!("handled above"),
    };
    if !kappa.bound_only.is_empty() {
        let names: Vec<&str> = kappa.bound_only.iter().map(|t| t.name()).collect();
        notes.push(format!("kappa for {} is only bounded by 1", names.join(",")));
    }
    finish(report, class, notes, "")
}

fn analyze_deep(s: &Scaling, k_max: u32) -> ScalingReport {
    let (table, growing) = exponent_trajectory(s, k_max);
    let last = table.last().expect("nonempty");
    let bounds = multilayer_term_bounds(s, last);
    let increments_negative = table.iter().all(|st| st.all().all(|q| q.is_negative()));
    let bounds_negative = bounds.iter().all(|b| b.bound.is_negative());

    let mut notes = vec![
        "multi-layer exponents are upper bounds; classification uses their signs only".to_string(),
        "term bounds use one sigma factor per layer; the alternative H(kappa + q_sigma) bookkeeping is recorded but not asserted".to_string(),
    ];
    let class = if increments_negative && bounds_negative && !growing {
        ClassKind::TrivialVanishing
    } else {
        if growing {
            notes.push("bound recursion still grows at k_max".to_string());
        }
        ClassKind::NotProvablyTrivial
    };
    ScalingReport {
        class,
        surviving_terms: BTreeSet::new(),
        exponent_table: table,
        kappa: None,
        decomposition: None,
        term_bounds: bounds,
        notes: notes.join("; "),
    }
}

/// Predicted exponents of the measurable observables after `step` steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    /// `(group, q)` for `a`, `v1..vH`, `w`.
    pub increments: Vec<(String, Exponent)>,
    /// `(subset label, q)` for every decomposition term, in mask order.
    pub terms: Vec<(String, Exponent)>,
    /// Exponent of the output itself: the largest term exponent.
    pub output: Exponent,
    pub exactness: Exactness,
}

/// Exponents at step `step >= 1`. Past a fixed point of the recursion the
/// last state is reused. Deep nets yield the term upper bounds.
pub fn predict_at_step(s: &Scaling, step: u32, k_max: u32) -> Prediction {
    let (table, _) = exponent_trajectory(s, k_max.max(step));
    let idx = (step.max(1) as usize).min(table.len()) - 1;
    let state = &table[idx];
    let depth = s.depth();
    let names = group_names(depth);
    let increments: Vec<(String, Exponent)> = names
        .iter()
        .cloned()
        .zip(std::iter::once(state.q_a).chain(state.q_v.iter().copied()).chain(std::iter::once(state.q_w)))
        .collect();
    let (terms, exactness) = if depth == 0 {
        let kappa = kappa_terms(&table[0], state).expect("shallow");
        let dec = decomposition_exponents(s, state, &kappa).expect("shallow");
        let masks = [Term::Empty, Term::A, Term::W, Term::Aw];
        let terms: Vec<(String, Exponent)> = masks.iter().map(|&t| (t.name().to_string(), dec.get(t))).collect();
        let exact = if kappa.bound_only.is_empty() { state.exactness } else { Exactness::UpperBound };
        (terms, exact)
    } else {
        let terms: Vec<(String, Exponent)> = multilayer_term_bounds(s, state).into_iter().map(|b| (b.term, b.bound)).collect();
        (terms, Exactness::UpperBound)
    };
    let output = terms.iter().map(|(_, q)| *q).max().expect("at least the empty term");
    Prediction { increments, terms, output, exactness }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CanonicalKind {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "NTK")]
    Ntk,
}

impl FromStr for CanonicalKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mf" | "meanfield" | "mean-field" => Ok(CanonicalKind::Mf),
            "ntk" => Ok(CanonicalKind::Ntk),
            other => Err(format!("unknown canonical scaling {other:?} (expected mf or ntk)")),
        }
    }
}

/// The mean-field and NTK scalings for a given depth and optimizer.
///
/// RMSProp learning-rate exponents refer to `eta_hat = eta / sigma`.
pub fn canonical_scaling(kind: CanonicalKind, depth: usize, optimizer: Optimizer) -> Scaling {
    let z = Exponent::zero();
    let (q_sigma, qt_aw, qt_v) = match (kind, optimizer) {
        (CanonicalKind::Mf, Optimizer::Gd) => (Exponent::integer(-1), Exponent::one(), Exponent::integer(2)),
        (CanonicalKind::Mf, Optimizer::RmsProp) => (Exponent::integer(-1), z, z),
        (CanonicalKind::Ntk, _) => (Exponent::new(-1, 2), z, z),
    };
    Scaling::new(q_sigma, qt_aw, vec![qt_v; depth], qt_aw, optimizer)
}
