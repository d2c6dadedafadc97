mod common;

use std::time::Instant;

use care_core::baselines;
use care_core::dataio::{self, Split};
use care_core::harness::{self, GridMethod, PartitionStudyConfig, SweepConfig};
use care_core::pipeline::{StateLabeling, SvdModel, SvdOptions, TensorModel, TensorOptions};
use care_core::synth::{self, RegimeAConfig, RegimeBConfig};
use care_core::{ScoreMatrix, SplrParams, TaskKind};
use nalgebra::DMatrix;

#[test]
fn csv_round_trip_feeds_the_spectral_path() {
    let d = synth::gen_regime_a(&RegimeAConfig { n: 3000, judges_per_view: 3, seed: 4, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scores.csv");
    d.matrix.write_csv(&path, "label").unwrap();
    let loaded = dataio::load_csv(&path, Some("label")).unwrap().matrix;
    assert_eq!(loaded.n_items(), 3000);
    let model = SvdModel::fit(&loaded, &SvdOptions::default(), None).unwrap();
    let pred = harness::binarize_by_mean(&model.score(&loaded).unwrap().scores);
    let truth: Vec<f64> = d.quality.iter().map(|&q| q as f64).collect();
    assert!(harness::accuracy(&pred, &truth).unwrap() > 0.95);
}

#[test]
fn tensor_path_recovers_planted_means_on_regime_b() {
    let d = synth::gen_regime_b(&RegimeBConfig { seed: 3, ..Default::default() }).unwrap();
    let split = dataio::split(d.matrix.n_items(), 0.15, 3).unwrap();
    let train = d.matrix.select_rows(&split.train_idx).unwrap();
    let rows = DMatrix::from_fn(split.val_idx.len(), d.matrix.n_judges(), |i, j| d.matrix.values()[(split.val_idx[i], j)]);
    let labels: Vec<f64> = split.val_idx.iter().map(|&i| d.quality[i] as f64).collect();
    let opts = TensorOptions { partition: Some(d.partition.clone()), ..TensorOptions::default() };
    let model = TensorModel::fit(&train, &opts, &StateLabeling::Labels { rows, labels }).unwrap();
    let err = harness::max_mean_error(&model.raw_means(), &d.means);
    assert!(err < 0.2, "max mean error {err}");
    let prob = model.posterior(&train).unwrap().quality_prob;
    let truth: Vec<f64> = split.train_idx.iter().map(|&i| d.quality[i] as f64).collect();
    assert!(harness::accuracy(&harness::threshold_labels(&prob, 0.5), &truth).unwrap() > 0.95);
}

#[test]
fn grid_search_scores_match_a_manual_train_only_fit() {
    let d = synth::gen_regime_a(&RegimeAConfig { n: 2000, judges_per_view: 3, seed: 9, ..Default::default() }).unwrap();
    let m = &d.matrix;
    let split = dataio::split(m.n_items(), 0.2, 9).unwrap();
    let grid = harness::svd_grid();
    let result = harness::grid_search(m, &GridMethod::Svd(SvdOptions::default()), &grid, &split).unwrap();
    let train = m.select_rows(&split.train_idx).unwrap();
    let val = m.select_rows(&split.val_idx).unwrap();
    let truth: Vec<f64> = split.val_idx.iter().map(|&i| m.truth().unwrap()[i]).collect();
    for (params, eval) in grid.iter().zip(&result.evaluations) {
        let model = SvdModel::fit(&train, &SvdOptions { splr: *params, ..SvdOptions::default() }, None).unwrap();
        let scores = model.score(&val).unwrap().scores;
        let pred = harness::threshold_labels(&scores, baselines::default_threshold(&train));
        let want = harness::accuracy(&pred, &truth).unwrap();
        assert_eq!(eval.score, Some(want), "gamma {}", params.gamma);
    }
}

#[test]
fn grid_search_ignores_validation_scores_when_training() {
    let d = synth::gen_regime_a(&RegimeAConfig { n: 1500, judges_per_view: 3, seed: 2, ..Default::default() }).unwrap();
    let split = dataio::split(d.matrix.n_items(), 0.2, 2).unwrap();
    // Corrupting every held-out row must change nothing but the held-out predictions,
    // so training on the complement alone gives the same model either way.
    let mut x = d.matrix.values().clone();
    for &i in &split.val_idx {
        x.row_mut(i).fill(0.0);
    }
    let corrupted = d.matrix.map_values(x).unwrap();
    let opts = SvdOptions::default();
    let a = SvdModel::fit(&d.matrix.select_rows(&split.train_idx).unwrap(), &opts, None).unwrap();
    let b = SvdModel::fit(&corrupted.select_rows(&split.train_idx).unwrap(), &opts, None).unwrap();
    assert_eq!(a.weights(), b.weights());
}

#[test]
fn grid_search_needs_truth_and_both_splits() {
    let m = ScoreMatrix::from_values(DMatrix::from_fn(20, 3, |i, j| (i * 3 + j) as f64)).unwrap();
    let split = Split { train_idx: (0..15).collect(), val_idx: (15..20).collect() };
    let method = GridMethod::Svd(SvdOptions::default());
    assert!(harness::grid_search(&m, &method, &harness::svd_grid(), &split).is_err());
    let labeled = m.with_truth(vec![1.0; 20]).unwrap().with_task_kind(TaskKind::Binary);
    let empty = Split { train_idx: (0..20).collect(), val_idx: vec![] };
    assert!(harness::grid_search(&labeled, &method, &harness::svd_grid(), &empty).is_err());
}

#[test]
fn sweep_reports_are_deterministic() {
    let cfg = SweepConfig { values: vec![0.5], seeds: 2, ..SweepConfig::regime_b() };
    let a = harness::regime_b_sweep(&cfg).unwrap();
    let b = harness::regime_b_sweep(&cfg).unwrap();
    assert_eq!(a, b);
    let started = Instant::now();
    let mut ra = a.to_report("regime_b", started);
    let mut rb = b.to_report("regime_b", started);
    ra.wall_time_s = 0.0;
    rb.wall_time_s = 0.0;
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    assert!(ra.aggregate.keys().any(|k| k.contains("care_tensor")));
}

#[test]
fn partition_study_on_a_small_budget() {
    let cfg = PartitionStudyConfig { seeds: 2, ..Default::default() };
    let study = harness::partition_study(&cfg).unwrap();
    assert_eq!(study.seeds.len(), 2);
    assert!(study.median_graph < study.median_random);
    for s in &study.seeds {
        assert!(s.graph_cross_edges <= s.random_cross_edges);
    }
    let report = study.to_report(&cfg, Instant::now());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partition_study.json");
    report.write_json(&path).unwrap();
    let back: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back["method"], report.method);
}

#[test]
fn theorem_suite_names_every_check() {
    let cfg = harness::TheoremConfig {
        exact_models: 3,
        stability_models: 3,
        misspecification_models: 3,
        observations_per_model: 50,
        rate_seeds: 2,
        sample_sizes: vec![1000, 4000],
        ..Default::default()
    };
    let report = harness::theorem_suite(&cfg).unwrap();
    let names = report.check_names();
    for want in ["exact_recovery", "stability", "misspecification", "spectral_rate", "tensor_rate"] {
        assert!(names.iter().any(|n| n == want), "missing {want} in {names:?}");
    }
}

#[test]
fn unsupervised_tensor_fit_on_regime_a() {
    let d = synth::gen_regime_a(&RegimeAConfig { n: 20_000, judges_per_view: 5, seed: 1, ..Default::default() }).unwrap();
    let opts = TensorOptions { splr: SplrParams::new(0.1, 0.1), ..TensorOptions::default() };
    let model = TensorModel::fit(&d.matrix, &opts, &StateLabeling::Unsupervised).unwrap();
    let prob = model.posterior(&d.matrix).unwrap().quality_prob;
    let truth: Vec<f64> = d.quality.iter().map(|&q| q as f64).collect();
    let acc = harness::accuracy(&harness::threshold_labels(&prob, 0.5), &truth).unwrap();
    assert!(acc > 0.9, "accuracy {acc}");
}
