use std::path::Path;
use std::process::{Command, Output};

use labcli::config::{DatasetSpec, ExperimentConfig, KernelSpec, MfSpec, ReferenceOverrides, ScalingSpec};
use proptest::prelude::*;
use widthlab::net::InitDist;
use widthlab::scaling::Optimizer;
use widthlab::trainer::ProbeSchedule;
use widthlab::Exponent;

fn widthlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_widthlab")).args(args).output().expect("binary runs")
}

fn class_of(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    v["class"].as_str().unwrap().to_string()
}

#[test]
fn analyze_classifies_anchor_scalings() {
    let cases = [
        (["--q-sigma=-1/2", "--qt-a=0", "--qt-w=0"], "NTK"),
        (["--q-sigma=-1", "--qt-a=1", "--qt-w=1"], "MeanField"),
        (["--q-sigma=0", "--qt-a=1", "--qt-w=1"], "Divergent"),
    ];
    for (args, class) in cases {
        let mut full = vec!["analyze"];
        full.extend(args);
        assert_eq!(class_of(&widthlab(&full)), class, "{args:?}");
    }
}

#[test]
fn malformed_rational_is_a_usage_error() {
    for bad in ["--q-sigma=-1/x", "--q-sigma=1/0", "--q-sigma=half"] {
        let out = widthlab(&["analyze", bad, "--qt-a=0", "--qt-w=0"]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
    }
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.in.json");
    std::fs::write(&path, body).unwrap();
    path
}

fn small_config(scalings: &str, widths: &str, seeds: &str, steps: usize) -> String {
    format!(
        r#"{{"dataset": {{"kind": "synthetic", "n_train": 32, "n_test": 16, "d0": 6, "separation": 3.0, "seed": 4}},
            "scalings": {scalings}, "widths": {widths}, "seeds": {seeds}, "steps": {steps}}}"#
    )
}

fn sweep(config: &Path, out: &Path) -> Output {
    widthlab(&["sweep", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

#[test]
fn sweep_writes_one_row_per_evaluated_step() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config(r#"["ntk"]"#, "[8, 16]", "[0]", 1));
    let out = tmp.path().join("out");
    assert!(sweep(&cfg, &out).status.success());
    let mut r = csv::Reader::from_path(out.join("runs.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["run_id", "scaling", "H", "optimizer", "d", "seed", "step", "train_loss", "test_loss", "test_acc", "diverged"]
    );
    assert_eq!(r.records().count(), 2 * (1 + 1));
    for name in ["decomp.csv", "increments.csv", "config.json"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn sweeps_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config(r#"["mf", "ntk"]"#, "[4, 8, 16]", "[0, 1, 2]", 3));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(sweep(&cfg, &a).status.success());
    assert!(sweep(&cfg, &b).status.success());
    for name in ["runs.csv", "decomp.csv", "increments.csv"] {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        assert!(!x.is_empty());
        assert_eq!(x, y, "{name}");
    }
}

#[test]
fn fit_reports_ntk_increment_exponents() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config(r#"["ntk"]"#, "[32, 64, 128, 256]", "[0, 1]", 5));
    let out = tmp.path().join("out");
    assert!(sweep(&cfg, &out).status.success());
    assert!(widthlab(&["fit", "--out", out.to_str().unwrap()]).status.success());
    let mut r = csv::Reader::from_path(out.join("fits.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(Result::unwrap).collect();
    for obs in ["inc_a@5", "inc_w@5"] {
        let row = rows.iter().find(|r| &r[3] == obs).unwrap();
        assert_eq!(&row[4], "-1/2");
        assert_eq!(&row[7], "Match", "{row:?}");
    }
}

#[test]
fn report_on_empty_dir_lists_missing_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = widthlab(&["report", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    for name in ["runs.csv", "decomp.csv", "increments.csv"] {
        assert!(msg.contains(name), "{msg}");
    }
}

/// Checks that every opened element is closed in order.
fn well_formed(svg: &str) -> Result<(), String> {
    let mut stack: Vec<String> = Vec::new();
    let mut rest = svg;
    while let Some(start) = rest.find('<') {
        let end = rest[start..].find('>').ok_or("unterminated tag")? + start;
        let tag = &rest[start + 1..end];
        if let Some(name) = tag.strip_prefix('/') {
            match stack.pop() {
                Some(open) if open == name => {}
                other => return Err(format!("closing {name} but open {other:?}")),
            }
        } else if !tag.ends_with('/') {
            stack.push(tag.split_whitespace().next().ok_or("empty tag")?.to_string());
        }
        if rest[end + 1..].find('<').is_some_and(|n| rest[end + 1..end + 1 + n].contains('>')) {
            return Err("stray '>' in text".into());
        }
        rest = &rest[end + 1..];
    }
    if stack.is_empty() {
        Ok(())
    } else {
        Err(format!("unclosed {stack:?}"))
    }
}

#[test]
fn report_draws_one_polyline_per_series() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config(r#"["mf"]"#, "[8, 16, 32]", "[0]", 2));
    let out = tmp.path().join("out");
    assert!(sweep(&cfg, &out).status.success());
    let rep = widthlab(&["report", "--out", out.to_str().unwrap()]);
    assert!(rep.status.success(), "{}", String::from_utf8_lossy(&rep.stderr));
    for name in ["loss_vs_width.svg", "loss_vs_step.svg", "var_f_vs_width.svg"] {
        let svg = std::fs::read_to_string(out.join(name)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1, "{name}");
        assert!(svg.contains("width d") || svg.contains(">step<"), "{name}");
        well_formed(&svg).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn tag_checker_rejects_broken_markup() {
    assert!(well_formed("<svg><g></svg>").is_err());
    assert!(well_formed("<svg><line/></svg>").is_ok());
}

#[test]
fn diverging_train_exits_with_code_4() {
    let tmp = tempfile::tempdir().unwrap();
    let body = small_config(r#"["ntk"]"#, "[16]", "[0]", 3)
        .replace(r#""steps": 3"#, r#""steps": 3, "reference": {"eta_star": 1e300}"#);
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    let run = widthlab(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(4));
    assert!(out.join("runs.csv").is_file() && out.join("checkpoint.json").is_file());

    let healthy = write_config(tmp.path(), &small_config(r#"["ntk"]"#, "[16]", "[0, 1]", 3));
    let ok = widthlab(&["train", "--config", healthy.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "1"]);
    assert!(ok.status.success());
}

#[test]
fn kernel_and_mf_write_their_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let body = small_config(r#"["ntk"]"#, "[8, 32]", "[0]", 2).replace(
        r#""steps": 2"#,
        r#""steps": 2, "kernel": {"n_mc": 256, "n_query": 3}, "mf": {"d_ref": 64, "eta_star": 1.0, "sigma_star": 1.0, "steps": 2}"#,
    );
    let cfg = write_config(tmp.path(), &body);
    let out = tmp.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    assert!(widthlab(&["kernel", "--config", c, "--out", o]).status.success());
    let mut r = csv::Reader::from_path(out.join("kernel_dyn.csv")).unwrap();
    assert_eq!(r.records().count(), 2 * 3 * 3);
    assert!(widthlab(&["mf", "--config", c, "--out", o]).status.success());
    let text = std::fs::read_to_string(out.join("wasserstein.csv")).unwrap();
    assert!(text.starts_with("k,d,d_ref,w2\n2,8,64,"), "{text}");
}

fn exponent() -> impl Strategy<Value = Exponent> {
    (-8i64..=8, 1i64..=6).prop_map(|(n, d)| Exponent::new(n, d))
}

fn scaling_spec(depth: usize) -> impl Strategy<Value = ScalingSpec> {
    prop_oneof![
        prop::sample::select(vec!["mf", "ntk"]).prop_map(|n| ScalingSpec::Named(n.to_string())),
        (exponent(), exponent(), prop::collection::vec(exponent(), depth), exponent(), any::<bool>()).prop_map(
            |(q_sigma, qt_a, qt_v, qt_w, named)| ScalingSpec::Explicit {
                name: named.then(|| format!("s{q_sigma}")),
                q_sigma,
                qt_a,
                qt_v,
                qt_w,
            }
        ),
    ]
}

fn config() -> impl Strategy<Value = ExperimentConfig> {
    (0usize..3).prop_flat_map(|depth| {
        (
            prop::collection::vec(scaling_spec(depth), 1..4),
            prop::collection::btree_set(1usize..5000, 1..6),
            prop::collection::btree_set(any::<u64>(), 1..4),
            0usize..200,
            prop::option::of(-1e3f64..1e3),
            any::<bool>(),
            0.01f64..0.99,
            prop::option::of(prop::collection::vec(0usize..200, 0..4)),
        )
            .prop_map(move |(scalings, widths, seeds, steps, eta, rms, alpha, probe_steps)| ExperimentConfig {
                dataset: if rms {
                    DatasetSpec::Cifar2 { path: "data/cifar".into(), n_train: 100, n_test: 50 }
                } else {
                    DatasetSpec::Synthetic { n_train: 10, n_test: 4, d0: 3, separation: alpha * 7.0, seed: steps as u64 }
                },
                scalings,
                depth,
                optimizer: if rms { Optimizer::RmsProp } else { Optimizer::Gd },
                reference: ReferenceOverrides { eta_star: eta.map(f64::abs), ..Default::default() },
                widths: widths.into_iter().collect(),
                seeds: seeds.into_iter().collect(),
                steps,
                probes: probe_steps.map(|steps| ProbeSchedule { steps, increments: rms, decomposition: true }),
                alpha,
                init: if rms { InitDist::SymmetricUniform } else { InitDist::StdNormal },
                out_dir: None,
                kernel: KernelSpec { n_mc: steps + 1, n_query: 3, mc_seed: 9 },
                mf: MfSpec { d_ref: 64, eta_star: alpha, sigma_star: 1.0 / alpha, steps },
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips(cfg in config()) {
        prop_assume!(cfg.validate().is_ok());
        let text = cfg.to_json();
        let back = ExperimentConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json(), text);
    }
}
