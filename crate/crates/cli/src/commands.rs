use std::io::Write;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use care_core::baselines;
use care_core::dataio::{self, AggregationReport, Split};
use care_core::harness::{self, GridMethod, PartitionStudyConfig, RunReport, SweepConfig, TheoremConfig};
use care_core::pipeline::{PartitionSource, StateLabeling, SvdModel, SvdOptions, TensorModel, TensorOptions};
use care_core::spectral::{CalibrationTarget, SymmetryRule, WeightMode};
use care_core::synth::{self, PlantedGraphConfig, RegimeAConfig, RegimeBConfig, SynthData};
use care_core::tensor::CpOptions;
use care_core::{ScoreMatrix, SplrParams};
use serde_json::json;

use crate::{AggregateArgs, BenchArgs, Experiment, Method, PartitionFrom, Regime, Rule, SynthArgs, TheoryArgs, Weights};

fn say(line: &str) {
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn svd_options(a: &AggregateArgs) -> SvdOptions {
    SvdOptions {
        splr: SplrParams::new(a.gamma, a.tau),
        rule: match a.rule {
            Rule::Leading => SymmetryRule::Leading,
            Rule::Balanced => SymmetryRule::Balanced,
            Rule::Anchor => SymmetryRule::Anchor,
        },
        weights: match a.weights {
            Weights::Plain => WeightMode::Plain,
            Weights::ConfounderSubtracted => WeightMode::ConfounderSubtracted,
        },
        calibrate: true,
    }
}

fn tensor_options(a: &AggregateArgs, seed: u64) -> TensorOptions {
    TensorOptions {
        eps: a.eps,
        partition_restarts: a.restarts,
        cp: CpOptions { seed, ..CpOptions::default() },
        partition_source: match a.partition_from {
            PartitionFrom::Sparse => PartitionSource::SparsePart,
            PartitionFrom::Precision => PartitionSource::Precision,
        },
        ..TensorOptions::default()
    }
}

/// Runs the grid search when truth is present and returns the chosen point.
fn tune(
    m: &ScoreMatrix,
    method: GridMethod,
    grid: &[SplrParams],
    split: Option<&Split>,
    report: &mut AggregationReport,
) -> Result<Option<SplrParams>> {
    let Some(split) = split else { return Ok(None) };
    let result = harness::grid_search(m, &method, grid, split).context("grid search")?;
    report.params.insert("selected_gamma".into(), json!(result.best.gamma));
    report.params.insert("selected_tau".into(), json!(result.best.tau));
    report.metrics.insert(format!("val_{}", result.metric), result.best_score);
    report.diagnostics.insert("grid".into(), serde_json::to_value(&result.evaluations)?);
    Ok(Some(result.best))
}

fn anchors_from(m: &ScoreMatrix, split: Option<&Split>) -> Result<Option<(ScoreMatrix, Vec<f64>)>> {
    let Some(split) = split else {
        bail!("the anchor rule needs --truth-col for its labeled items")
    };
    let truth = m.truth().expect("split only exists with truth");
    let labels = split.val_idx.iter().map(|&i| truth[i]).collect();
    Ok(Some((m.select_rows(&split.val_idx)?, labels)))
}

pub fn aggregate(a: &AggregateArgs, seed: u64, out: &Path) -> Result<()> {
    let ingested = dataio::load_csv(&a.input, a.truth_col.as_deref())
        .with_context(|| format!("reading {}", a.input.display()))?;
    let m = ingested.matrix;
    let classify = m.task_kind().is_classification();
    let method_name = serde_json::to_value(a.method)?.as_str().unwrap_or_default().to_string();
    let mut report = AggregationReport::new(&method_name, seed);
    report.config = json!({ "command": "aggregate", "seed": seed, "out": out, "args": a });
    report.params.insert("task_kind".into(), serde_json::to_value(m.task_kind())?);
    report.diagnostics.insert("dropped_rows".into(), json!(ingested.dropped_rows));

    let use_grid = m.truth().is_some() && !a.no_grid && matches!(a.method, Method::CareSvd | Method::CareTensor);
    let needs_labels = match a.method {
        Method::CareSvd => a.rule == Rule::Anchor,
        Method::CareTensor => true,
        _ => false,
    };
    let split = if use_grid || (m.truth().is_some() && needs_labels) {
        Some(dataio::split(m.n_items(), a.val_frac, seed)?)
    } else {
        None
    };
    let train = match &split {
        Some(s) => m.select_rows(&s.train_idx)?,
        None => m.clone(),
    };

    let (scores, labels): (Vec<f64>, Option<Vec<f64>>) = match a.method {
        Method::Avg => {
            let s = baselines::avg(&m).scores;
            let l = classify.then(|| harness::threshold_labels(&s, baselines::default_threshold(&m)));
            (s, l)
        }
        Method::Mv => {
            let out = baselines::mv(&m, a.threshold);
            report.diagnostics.insert("ties".into(), json!(out.ties));
            (out.scores.clone(), classify.then_some(out.scores))
        }
        Method::Ds => {
            let ds = baselines::dawid_skene(m.values(), 500, 1e-6)?;
            report.diagnostics.insert("iterations".into(), json!(ds.iterations));
            report.diagnostics.insert("converged".into(), json!(ds.converged));
            report.diagnostics.insert("sensitivity".into(), json!(ds.sensitivity));
            report.diagnostics.insert("specificity".into(), json!(ds.specificity));
            (ds.posteriors, Some(ds.labels))
        }
        Method::CareSvd => {
            let base = svd_options(a);
            let grid_split = split.as_ref().filter(|_| use_grid);
            let params = tune(&m, GridMethod::Svd(base), &harness::svd_grid(), grid_split, &mut report)?.unwrap_or(base.splr);
            let opts = SvdOptions { splr: params, ..base };
            let anchors = if a.rule == Rule::Anchor { anchors_from(&m, split.as_ref())? } else { None };
            let model = SvdModel::fit(&train, &opts, anchors.as_ref().map(|(rows, l)| (rows.values(), l.as_slice())))?;
            report.params.insert("gamma".into(), json!(params.gamma));
            report.params.insert("tau".into(), json!(params.tau));
            report.diagnostics.insert("weights".into(), json!(model.weights().as_slice()));
            report.diagnostics.insert("latent_rank".into(), json!(model.factors.rank()));
            report.diagnostics.insert("quality_factor".into(), json!(model.factors.quality_index));
            let q = model.score(&m)?;
            let l = classify.then(|| harness::threshold_labels(&q.scores, baselines::default_threshold(&train)));
            (q.scores, l)
        }
        Method::CareTensor => {
            let base = tensor_options(a, seed);
            let grid_split = split.as_ref().filter(|_| use_grid);
            let params = tune(&m, GridMethod::Tensor(base.clone()), &harness::tensor_grid(), grid_split, &mut report)?
                .unwrap_or(base.splr);
            let opts = TensorOptions { splr: params, ..base };
            let labeling = match (&split, m.truth()) {
                (Some(sp), Some(truth)) => StateLabeling::Labels {
                    rows: m.select_rows(&sp.val_idx)?.values().clone(),
                    labels: sp.val_idx.iter().map(|&i| truth[i]).collect(),
                },
                _ => StateLabeling::Unsupervised,
            };
            report.params.insert("state_labeling".into(), json!(if split.is_some() { "labels" } else { "unsupervised" }));
            let model = TensorModel::fit(&train, &opts, &labeling)?;
            report.params.insert("gamma".into(), json!(params.gamma));
            report.params.insert("tau".into(), json!(params.tau));
            let names = m.judge_names();
            let views: Vec<Vec<&str>> =
                model.partition.groups().iter().map(|g| g.iter().map(|&j| names[j].as_str()).collect()).collect();
            report.diagnostics.insert("partition".into(), json!(views));
            report.diagnostics.insert("cross_mass".into(), json!(model.partition.cross_mass));
            report.diagnostics.insert("cp_fit".into(), json!(model.moments.cp.fit));
            report.diagnostics.insert("effective_rank".into(), json!(model.moments.effective_rank));
            report.diagnostics.insert("state_weights".into(), json!(model.mixture.weights));
            let prob = model.posterior(&m)?.quality_prob;
            let l = harness::threshold_labels(&prob, 0.5);
            if let Some(truth) = m.truth().filter(|t| t.iter().all(|&v| v == 0.0 || v == 1.0)) {
                report.metrics.insert("posterior_accuracy".into(), harness::accuracy(&l, truth)?);
            }
            if classify {
                (prob, Some(l))
            } else {
                (harness::calibrate(&prob, CalibrationTarget::from_average(&train)), None)
            }
        }
    };

    if let Some(truth) = m.truth() {
        match &labels {
            Some(l) => {
                report.metrics.insert("accuracy".into(), harness::accuracy(l, truth)?);
                if let Ok(f) = harness::fpr(l, truth) {
                    report.metrics.insert("fpr".into(), f);
                }
            }
            None => {
                report.metrics.insert("mae".into(), harness::mae(&scores, truth)?);
            }
        }
    }
    report.per_item_scores = scores.clone();
    let scores_path = out.join("scores.csv");
    match &labels {
        Some(l) => dataio::write_scores_csv(&scores_path, &["score", "label"], &[&scores, l])?,
        None => dataio::write_scores_csv(&scores_path, &["score"], &[&scores])?,
    }
    report.write_json(&out.join("report.json"))?;
    for (k, v) in &report.metrics {
        say(&format!("{k}: {v:.4}"));
    }
    say(&format!("wrote {} and {}", scores_path.display(), out.join("report.json").display()));
    Ok(())
}

pub fn synth(a: &SynthArgs, seed: u64, out: &Path) -> Result<()> {
    let (name, config, data): (&str, serde_json::Value, SynthData) = match a.regime {
        Regime::A => {
            let d = RegimeAConfig::default();
            let cfg = RegimeAConfig { n: a.n.unwrap_or(d.n), g: a.strength, seed, ..d };
            ("regime_a", serde_json::to_value(cfg)?, synth::gen_regime_a(&cfg)?)
        }
        Regime::B => {
            let d = RegimeBConfig::default();
            let cfg = RegimeBConfig { n: a.n.unwrap_or(d.n), c: a.strength, seed, ..d };
            ("regime_b", serde_json::to_value(cfg)?, synth::gen_regime_b(&cfg)?)
        }
        Regime::Graph => {
            let d = PlantedGraphConfig::default();
            let cfg = PlantedGraphConfig { n: a.n.unwrap_or(d.n), seed, ..d };
            ("graph", serde_json::to_value(cfg)?, synth::gen_planted_graph(&cfg)?)
        }
    };
    let csv_path = out.join(format!("{name}.csv"));
    data.matrix.write_csv(&csv_path, "label")?;
    let truth = json!({
        "config": config,
        "cli": { "command": "synth", "seed": seed, "args": a },
        "state_means": data.means.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>(),
        "state_weights": data.weights,
        "views": data.partition.groups(),
        "confounder": data.confounder,
    });
    let json_path = out.join(format!("{name}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&truth)? + "\n")?;
    say(&format!("wrote {} and {}", csv_path.display(), json_path.display()));
    Ok(())
}

fn attach_cli(report: &mut RunReport, command: serde_json::Value) {
    let experiment = std::mem::take(&mut report.config);
    report.config = json!({ "cli": command, "experiment": experiment });
}

fn sweep_summary(report: &RunReport) {
    for (key, s) in &report.aggregate {
        say(&format!("{key}: {:.3}", s.mean));
    }
}

pub fn bench(a: &BenchArgs, seed: u64, out: &Path) -> Result<()> {
    let started = Instant::now();
    let cli = json!({ "command": "bench", "seed": seed, "args": a });
    let (name, mut report) = match a.experiment {
        Experiment::PartitionStudy => {
            let d = PartitionStudyConfig::default();
            let cfg = PartitionStudyConfig { seeds: a.seeds.unwrap_or(d.seeds), base_seed: seed, ..d };
            let study = harness::partition_study(&cfg)?;
            say(&format!(
                "graph-aware median error {:.4}, random {:.4}, ratio {:.2}",
                study.median_graph, study.median_random, study.ratio
            ));
            ("partition_study", study.to_report(&cfg, started))
        }
        Experiment::RegimeA => {
            let d = SweepConfig::regime_a();
            let cfg = SweepConfig { seeds: a.seeds.unwrap_or(d.seeds), base_seed: seed, ..d };
            let r = harness::regime_a_sweep(&cfg)?.to_report("regime_a", started).with_config(&cfg);
            sweep_summary(&r);
            ("regime_a", r)
        }
        Experiment::RegimeB => {
            let d = SweepConfig::regime_b();
            let cfg = SweepConfig { seeds: a.seeds.unwrap_or(d.seeds), base_seed: seed, ..d };
            let r = harness::regime_b_sweep(&cfg)?.to_report("regime_b", started).with_config(&cfg);
            sweep_summary(&r);
            ("regime_b", r)
        }
    };
    attach_cli(&mut report, cli);
    let path = out.join(format!("bench_{name}.json"));
    report.write_json(&path)?;
    say(&format!("wrote {}", path.display()));
    Ok(())
}

pub fn check_theory(a: &TheoryArgs, seed: u64, out: &Path) -> Result<()> {
    let d = TheoremConfig::default();
    let cfg = TheoremConfig {
        exact_models: a.models.unwrap_or(d.exact_models),
        stability_models: a.models.unwrap_or(d.stability_models),
        misspecification_models: a.models.unwrap_or(d.misspecification_models),
        observations_per_model: a.observations,
        rate_seeds: a.seeds,
        sample_sizes: a.sizes.clone(),
        base_seed: seed,
        ..d
    };
    let mut report = harness::theorem_suite(&cfg)?;
    attach_cli(&mut report, json!({ "command": "check-theory", "seed": seed, "args": a }));
    for name in report.check_names() {
        let runs: Vec<_> = report.checks.iter().filter(|c| c.check == name).collect();
        let passed = runs.iter().filter(|c| c.passed).count();
        say(&format!("{name}: {passed}/{} passed", runs.len()));
    }
    let path = out.join("theory.json");
    report.write_json(&path)?;
    say(&format!("wrote {}", path.display()));
    Ok(())
}
