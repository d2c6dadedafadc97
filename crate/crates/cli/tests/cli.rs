use std::path::Path;
use std::process::{Command, Output};

use care_core::synth::{self, PlantedGraphConfig};
use care_core::{dataio, harness, tensor};

fn care(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_care"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("CARE_SEED")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = care(&["synth", "--regime", "graph", "--seed", "0", "--n", "500"], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["graph.csv", "graph.json"] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file} differs");
    }
}

#[test]
fn seed_comes_from_the_environment() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &Path, seed: &str| {
        Command::new(env!("CARGO_BIN_EXE_care"))
            .args(["synth", "--regime", "b", "--n", "200", "--out"])
            .arg(dir)
            .env("CARE_SEED", seed)
            .output()
            .unwrap()
    };
    assert!(run(a.path(), "1").status.success());
    assert!(run(b.path(), "2").status.success());
    assert_ne!(std::fs::read(a.path().join("regime_b.csv")).unwrap(), std::fs::read(b.path().join("regime_b.csv")).unwrap());
    assert_eq!(read_json(&a.path().join("regime_b.json"))["config"]["seed"], 1);
}

#[test]
fn avg_scores_are_row_means() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.csv");
    std::fs::write(&input, "a,b,c\n1,2,3\n4,4,7\n9,1,2\n").unwrap();
    let out = care(&["aggregate", input.to_str().unwrap(), "--method", "avg"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let scores = dataio::load_csv(&dir.path().join("scores.csv"), None).unwrap().matrix;
    assert_eq!(scores.values().as_slice(), &[2.0, 5.0, 4.0]);
    let report = read_json(&dir.path().join("report.json"));
    assert_eq!(report["method"], "avg");
    assert_eq!(report["config"]["args"]["method"], "avg");
}

#[test]
fn care_svd_reports_mae_and_selected_gamma() {
    let dir = tempfile::tempdir().unwrap();
    assert!(care(&["synth", "--regime", "a", "--n", "3000"], dir.path()).status.success());
    // Regime A labels are 0/1 while the judges score on a continuous scale.
    let data = dir.path().join("regime_a.csv");
    let out = care(&["aggregate", data.to_str().unwrap(), "--method", "care-svd", "--truth-col", "label"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("report.json"));
    assert!(report["metrics"]["mae"].is_number());
    assert!(report["params"]["selected_gamma"].is_number());
    assert_eq!(report["diagnostics"]["grid"].as_array().unwrap().len(), 11);
}

#[test]
fn care_tensor_reports_partition_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    assert!(care(&["synth", "--regime", "graph", "--n", "5000"], dir.path()).status.success());
    let data = dir.path().join("graph.csv");
    let out = care(
        &[
            "aggregate",
            data.to_str().unwrap(),
            "--method",
            "care-tensor",
            "--truth-col",
            "label",
            "--no-grid",
            "--partition-from",
            "precision",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("report.json"));
    for key in ["partition", "cross_mass", "cp_fit"] {
        assert!(!report["diagnostics"][key].is_null(), "missing {key}");
    }
    assert_eq!(report["diagnostics"]["partition"].as_array().unwrap().len(), 3);
    assert!(report["metrics"].as_object().unwrap().contains_key("mae"));
    // Bayes posterior under the planted parameters bounds what any fit can reach.
    let d = synth::gen_planted_graph(&PlantedGraphConfig { n: 5000, seed: 0, ..Default::default() }).unwrap();
    let r = tensor::responsibilities(&d.matrix, &d.means, &d.weights, &d.noise_cov).unwrap();
    let high = tensor::state_index(1, 0)..=tensor::state_index(1, 1);
    let bayes: Vec<f64> = (0..d.matrix.n_items()).map(|i| high.clone().map(|s| r[(i, s)]).sum()).collect();
    let truth: Vec<f64> = d.quality.iter().map(|&q| q as f64).collect();
    let oracle = harness::accuracy(&harness::threshold_labels(&bayes, 0.5), &truth).unwrap();
    let got = report["metrics"]["posterior_accuracy"].as_f64().unwrap();
    assert!(got >= oracle - 0.1, "posterior accuracy {got} vs planted-parameter accuracy {oracle}");
}

#[test]
fn check_theory_reports_five_named_checks() {
    let dir = tempfile::tempdir().unwrap();
    let out = care(&["check-theory", "--seeds", "2", "--models", "3", "--observations", "50", "--sizes", "1000,4000"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("theory.json"));
    let mut names: Vec<String> =
        report["checks"].as_array().unwrap().iter().map(|c| c["check"].as_str().unwrap().to_string()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names, ["exact_recovery", "misspecification", "spectral_rate", "stability", "tensor_rate"]);
    assert_eq!(report["config"]["experiment"]["rate_seeds"], 2);
}

#[test]
fn partition_study_bench_emits_the_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = care(&["bench", "--experiment", "d9", "--seeds", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ratio"));
    let report = read_json(&dir.path().join("bench_partition_study.json"));
    assert!(report["params"]["ratio"].as_f64().unwrap() > 1.0);
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = care(&["aggregate", "/nonexistent/scores.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = care(&["aggregate", "x.csv", "--bogus-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.csv");
    // Two independent judges leave no latent structure for the spectral path.
    let mut body = String::from("a,b\n");
    for i in 0..200u32 {
        body.push_str(&format!("{},{}\n", (i * 7919) % 101, (i * 104_729) % 97));
    }
    std::fs::write(&input, body).unwrap();
    let out = care(&["aggregate", input.to_str().unwrap(), "--method", "care-svd", "--gamma", "0.1", "--tau", "50"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
