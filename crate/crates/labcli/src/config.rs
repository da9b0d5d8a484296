//! Experiment configuration files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use widthlab::dataset::{load_cifar2, synthetic_split, Dataset};
use widthlab::net::InitDist;
use widthlab::scaling::{canonical_scaling, CanonicalKind, Optimizer, Scaling};
use widthlab::trainer::{ProbeSchedule, ReferenceConfig};
use widthlab::Exponent;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic { n_train: usize, n_test: usize, d0: usize, separation: f64, seed: u64 },
    Cifar2 { path: PathBuf, n_train: usize, n_test: usize },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok(match self {
            DatasetSpec::Synthetic { n_train, n_test, d0, separation, seed } => {
                synthetic_split(*n_train, *n_test, *d0, *separation, *seed)?
            }
            DatasetSpec::Cifar2 { path, n_train, n_test } => load_cifar2(path, *n_train, *n_test)?,
        })
    }
}

/// A canonical scaling by name (`"mf"`, `"ntk"`) or explicit exponents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScalingSpec {
    Named(String),
    Explicit {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        name: Option<String>,
        q_sigma: Exponent,
        qt_a: Exponent,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        qt_v: Vec<Exponent>,
        qt_w: Exponent,
    },
}

impl ScalingSpec {
    /// The label used in CSV output and the scaling it stands for.
    pub fn resolve(&self, depth: usize, optimizer: Optimizer) -> Result<(String, Scaling)> {
        match self {
            ScalingSpec::Named(n) => {
                let kind: CanonicalKind = n.parse().map_err(CliError::Usage)?;
                Ok((n.to_ascii_lowercase(), canonical_scaling(kind, depth, optimizer)))
            }
            ScalingSpec::Explicit { name, q_sigma, qt_a, qt_v, qt_w } => {
                if qt_v.len() != depth {
                    return Err(CliError::Usage(format!(
                        "scaling {q_sigma}/{qt_a}/{qt_w}: qt_v has {} entries but depth is {depth}",
                        qt_v.len()
                    )));
                }
                let s = Scaling::new(*q_sigma, *qt_a, qt_v.clone(), *qt_w, optimizer);
                let label = match name {
                    Some(n) => n.clone(),
                    None => {
                        let v: Vec<String> = qt_v.iter().map(|q| q.to_string()).collect();
                        format!("q_sigma={q_sigma} qt_a={qt_a} qt_v=[{}] qt_w={qt_w}", v.join(","))
                    }
                };
                Ok((label, s))
            }
        }
    }
}

/// Fields of the reference configuration that differ from the defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_star: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_star: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star_a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_star_w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(default = "KernelSpec::default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "KernelSpec::default_n_query")]
    pub n_query: usize,
    #[serde(default)]
    pub mc_seed: u64,
}

impl KernelSpec {
    fn default_n_mc() -> usize {
        1 << 16
    }
    fn default_n_query() -> usize {
        64
    }
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec { n_mc: Self::default_n_mc(), n_query: Self::default_n_query(), mc_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfSpec {
    pub d_ref: usize,
    pub eta_star: f64,
    pub sigma_star: f64,
    pub steps: usize,
}

impl Default for MfSpec {
    fn default() -> Self {
        MfSpec { d_ref: 4096, eta_star: 1.0, sigma_star: 1.0, steps: 10 }
    }
}

fn default_alpha() -> f64 {
    0.1
}

fn default_optimizer() -> Optimizer {
    Optimizer::Gd
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub scalings: Vec<ScalingSpec>,
    #[serde(default)]
    pub depth: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default)]
    pub reference: ReferenceOverrides,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// Defaults to increments and decomposition at the final step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probes: Option<ProbeSchedule>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub init: InitDist,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub mf: MfSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.scalings.is_empty() {
            return usage("at least one scaling is required".into());
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return usage("widths must be nonempty and positive".into());
        }
        if self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return usage(format!("widths must be strictly ascending, got {:?}", self.widths));
        }
        if self.seeds.is_empty() {
            return usage("at least one seed is required".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return usage(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return usage(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        let mut labels = BTreeSet::new();
        for spec in &self.scalings {
            let (label, _) = spec.resolve(self.depth, self.optimizer)?;
            if !labels.insert(label.clone()) {
                return usage(format!("duplicate scaling label {label:?}"));
            }
        }
        self.reference_config(1).validate().map_err(CliError::Usage)
    }

    /// Resolved `(label, scaling)` pairs in config order.
    pub fn resolved_scalings(&self) -> Result<Vec<(String, Scaling)>> {
        self.scalings.iter().map(|s| s.resolve(self.depth, self.optimizer)).collect()
    }

    pub fn reference_config(&self, d0: usize) -> ReferenceConfig {
        let o = &self.reference;
        let mut r = ReferenceConfig::new(self.optimizer, d0).with_steps(self.steps);
        if let Some(d) = o.d_star {
            r.d_star = d;
            r.sigma_star_a = 1.0 / (d as f64).sqrt();
            r.sigma_star_v = 1.0 / (d as f64).sqrt();
        }
        if let Some(e) = o.eta_star {
            r = r.with_eta(e);
        }
        r.sigma_star_a = o.sigma_star_a.unwrap_or(r.sigma_star_a);
        r.sigma_star_v = o.sigma_star_v.unwrap_or(r.sigma_star_v);
        r.sigma_star_w = o.sigma_star_w.unwrap_or(r.sigma_star_w);
        r.beta = o.beta.unwrap_or(r.beta);
        r.eps = o.eps.unwrap_or(r.eps);
        r.batch_size = o.batch_size.or(r.batch_size);
        r
    }

    pub fn probe_schedule(&self) -> ProbeSchedule {
        self.probes.clone().unwrap_or_else(|| ProbeSchedule::final_step(self.steps))
    }

    /// Applies the `--seed` and `--out` command-line overrides.
    pub fn with_overrides(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if out.is_some() {
            self.out_dir = out;
        }
        self
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use widthlab::exponent::q;

    const SAMPLE: &str = r#"{
        "dataset": {"kind": "synthetic", "n_train": 16, "n_test": 8, "d0": 4, "separation": 2.0, "seed": 1},
        "scalings": ["ntk", {"name": "mid", "q_sigma": "-3/4", "qt_a": "1/2", "qt_w": "1/2"}],
        "widths": [8, 16],
        "seeds": [0, 1],
        "steps": 3
    }"#;

    #[test]
    fn defaults_and_resolution() {
        let cfg = ExperimentConfig::from_json(SAMPLE).unwrap();
        assert_eq!(cfg.alpha, 0.1);
        assert_eq!(cfg.probe_schedule(), ProbeSchedule::final_step(3));
        let resolved = cfg.resolved_scalings().unwrap();
        assert_eq!(resolved[0].0, "ntk");
        assert_eq!(resolved[1].1, Scaling::shallow(q(-3, 4), q(1, 2), q(1, 2)));
        let r = cfg.reference_config(4);
        assert_eq!((r.steps, r.sigma_star_w), (3, 0.5));
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_json(SAMPLE).unwrap();
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn rejects_bad_grids() {
        for (from, to) in [("[8, 16]", "[16, 8]"), ("[0, 1]", "[1, 1]"), ("\"ntk\",", "\"ntk\", \"ntk\",")] {
            let err = ExperimentConfig::from_json(&SAMPLE.replace(from, to)).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{to}");
        }
        let deep = SAMPLE.replace("\"steps\": 3", "\"steps\": 3, \"depth\": 1");
        assert!(ExperimentConfig::from_json(&deep).is_err());
        let bad_q = SAMPLE.replace("-3/4", "-3/x");
        assert!(ExperimentConfig::from_json(&bad_q).is_err());
    }
}
