use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ensdown::data::{load_grid, save_grid, GridField};
use ensdown::ensemble::load_ensemble;
use ensdown_cli::commands::{EvaluationSummary, PREDICTAND_FILE, PREDICTION_FILE, PREDICTORS_FILE, SUMMARY_FILE};
use ensdown_cli::experiment::ExperimentVerdict;
use ensdown_cli::manifest::{RunManifest, MANIFEST_FILE};

fn ensdown(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensdown"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ENSDOWN_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = ensdown(args);
    assert!(
        out.status.success(),
        "ensdown {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny data set: 2x2 coarse, 4x4 fine, 1978-2045.
fn synth(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "synth", "--out", s(&out), "--seed", seed, "--coarse-height", "2", "--coarse-width", "2",
        "--fine-height", "4", "--fine-width", "4", "--start-year", "1978", "--end-year", "2045",
    ]);
    out
}

const TINY_TRAIN: [&str; 8] = ["--max-epochs", "3", "--patience", "1", "--conv-channels", "6,4,3", "--batch-size", "128"];

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let predictors = data.join(PREDICTORS_FILE);
    let predictand = data.join(PREDICTAND_FILE);
    let mut args = vec!["train", "--predictors", s(&predictors), "--predictand", s(&predictand), "--out", s(out)];
    args.extend_from_slice(&TINY_TRAIN);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_writes_grids_and_one_manifest_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", "3");
    let b = synth(dir.path(), "b", "3");
    let c = synth(dir.path(), "c", "4");
    let names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.len(), 4, "{names:?}");
    assert_eq!(names.iter().filter(|n| n.ends_with("manifest.json")).count(), 1);
    let (ma, mb, mc) = (RunManifest::load(&a).unwrap(), RunManifest::load(&b).unwrap(), RunManifest::load(&c).unwrap());
    assert_eq!(ma.artifact_hashes.len(), 3);
    assert_eq!(ma.artifact_hashes, mb.artifact_hashes);
    assert_ne!(ma.artifact_hashes, mc.artifact_hashes);
    assert_eq!(ma.seeds["generator"], 3);
    assert_eq!(ma.config["synth"]["fine_height"], 4);
    let generator: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("generator.json")).unwrap()).unwrap();
    assert!(generator["truth"]["warming_map"].is_array());
}

#[test]
fn synth_rejects_a_non_integer_grid_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    let r = ensdown(&["synth", "--out", s(&out), "--coarse-height", "3", "--fine-height", "8"]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("integer multiple"), "{err}");
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn flags_override_config_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("synth.json");
    std::fs::write(&config, r#"{"seed": 5, "synth": {"coarse_height": 2, "coarse_width": 2, "fine_height": 4, "fine_width": 4, "start_year": 1990, "end_year": 1992, "warming_rate": 0.1}}"#).unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--config", s(&config), "--out", s(&out), "--end-year", "1991"]);
    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.config["seed"], 5);
    assert_eq!(m.config["synth"]["end_year"], 1991);
    assert_eq!(m.config["synth"]["warming_rate"], 0.1);
    assert_eq!(m.config["synth"]["channels"], 12);
    // a manifest works as a config file and reproduces the artifacts
    let again = dir.path().join("e");
    ok(&["synth", "--config", s(&out.join(MANIFEST_FILE)), "--out", s(&again)]);
    assert_eq!(RunManifest::load(&again).unwrap().artifact_hashes, m.artifact_hashes);
}

#[test]
fn train_predict_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", "1");

    let single = dir.path().join("single");
    train(&data, &single, &["--members", "1", "--seed", "9"]);
    let params: Vec<_> = std::fs::read_dir(&single)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "params"))
        .collect();
    assert_eq!(params.len(), 1);
    let m = RunManifest::load(&single).unwrap();
    assert_eq!(m.config["members"], 1);
    assert_eq!(m.config["train"]["max_epochs"], 3);

    // worker count does not change the result
    let ens_a = dir.path().join("ens_a");
    let ens_b = dir.path().join("ens_b");
    train(&data, &ens_a, &["--members", "2", "--seed", "9", "--workers", "1"]);
    let out = Command::new(env!("CARGO_BIN_EXE_ensdown"))
        .args(["train", "--predictors", s(&data.join(PREDICTORS_FILE)), "--predictand", s(&data.join(PREDICTAND_FILE)), "--out", s(&ens_b), "--members", "2", "--seed", "9"])
        .args(TINY_TRAIN)
        .env("ENSDOWN_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (ha, hb) = (RunManifest::load(&ens_a).unwrap(), RunManifest::load(&ens_b).unwrap());
    assert_eq!(ha.artifact_hashes, hb.artifact_hashes);
    assert_eq!(hb.config["workers"], 2);

    // --members-used 1 is the first member on its own
    let predictors = data.join(PREDICTORS_FILE);
    let p1 = dir.path().join("p1");
    let p2 = dir.path().join("p2");
    for (out, k) in [(&p1, "1"), (&p2, "2")] {
        ok(&[
            "predict", "--ensemble", s(&ens_a), "--predictors", s(&predictors), "--out", s(out),
            "--period", "2006-2045", "--season", "summer", "--members-used", k,
        ]);
    }
    let pred = load_grid(&p1.join(PREDICTION_FILE)).unwrap();
    assert_eq!(pred.n_channels(), 4);
    assert_eq!(pred.variables(), ["mu", "sigma2", "lower", "upper"]);
    let ens = load_ensemble(&ens_a).unwrap();
    let x = load_grid(&predictors)
        .unwrap()
        .select_period(&"2006-2045".parse::<ensdown::data::PeriodSpec>().unwrap().with_season(ensdown::data::Season::summer()))
        .unwrap();
    let direct = ens.members[0].predict(&x).unwrap();
    assert_eq!(pred.channel_matrix(0).unwrap(), direct.mu);
    assert_eq!(pred.channel_matrix(1).unwrap(), direct.sigma2);

    // evaluation with a sweep: one row per (period, M, metric, gridpoint or MEAN)
    let eval = dir.path().join("eval");
    ok(&[
        "evaluate", "--predictions", s(&p1), s(&p2), "--predictand", s(&data.join(PREDICTAND_FILE)),
        "--out", s(&eval), "--periods", "2006-2025,2026-2045", "--sweep", "--ensemble", s(&ens_a),
        "--predictors", s(&predictors),
    ]);
    let sweep = std::fs::read_to_string(eval.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "period,season,M,gridpoint_id,lat,lon,metric,value");
    assert_eq!(lines.len() - 1, 2 * 2 * 2 * (16 + 1));
    assert!(!sweep.contains('\r'));
    let summary: EvaluationSummary = serde_json::from_slice(&std::fs::read(eval.join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary.reports.len(), 4);
    assert_eq!(summary.coverage_maps.len(), 2);
    assert!(summary.max_convexity_gap.unwrap() <= 1e-12);
    // the predictions agree with the sweep
    for r in &summary.reports {
        let twin = summary.sweep.iter().find(|w| w.period == r.period && w.m == r.m).unwrap();
        assert!((twin.rmse_mean - r.rmse_mean).abs() < 1e-12);
        assert!((twin.coverage_mean - r.coverage_mean).abs() < 1e-12);
    }

    // a summer-only prediction cannot be scored over the whole year
    let r = ensdown(&[
        "evaluate", "--predictions", s(&p1), "--predictand", s(&data.join(PREDICTAND_FILE)),
        "--out", s(&dir.path().join("eval_all")), "--periods", "2006-2025", "--season", "all",
    ]);
    assert!(!r.status.success());
}

#[test]
fn perfect_predictions_have_zero_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", "2");
    let y = load_grid(&data.join(PREDICTAND_FILE)).unwrap();
    let target = y.channel_matrix(0).unwrap();
    let make = |v: &ndarray::Array2<f64>, name: &str| {
        GridField::from_matrix(v.view(), name, "degC", y.lat(), y.lon(), y.time().to_vec()).unwrap()
    };
    let field = GridField::stack_channels(&[
        make(&target, "mu"),
        make(&target.mapv(|_| 1.0), "sigma2"),
        make(&(&target - 1.0), "lower"),
        make(&(&target + 1.0), "upper"),
    ])
    .unwrap();
    let pred_dir = dir.path().join("perfect");
    std::fs::create_dir(&pred_dir).unwrap();
    save_grid(&field, &pred_dir.join(PREDICTION_FILE)).unwrap();
    let mut m = RunManifest::new("predict", &ensdown_cli::commands::PredictSettings::default()).unwrap();
    m.config["members_used"] = 1.into();
    std::fs::write(pred_dir.join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();

    let eval = dir.path().join("eval");
    ok(&[
        "evaluate", "--predictions", s(&pred_dir), "--predictand", s(&data.join(PREDICTAND_FILE)),
        "--out", s(&eval), "--season", "all", "--periods", "1980-2002,2006-2040",
    ]);
    let csv = std::fs::read_to_string(eval.join("report.csv")).unwrap();
    let rmse: Vec<f64> = csv
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(6) == Some("rmse"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(rmse.len(), 2 * 17);
    assert!(rmse.iter().all(|&v| v == 0.0));
    assert!(csv.lines().any(|l| l.starts_with("1980-2002,all,1,MEAN,,,coverage,1")));
}

#[test]
fn evaluate_defaults_to_the_three_future_periods() {
    let s = ensdown_cli::commands::EvaluateSettings::default();
    let labels: Vec<String> = s.periods.iter().map(|p| p.label()).collect();
    assert_eq!(labels, ["2006-2040", "2041-2070", "2071-2100"]);
    assert_eq!(s.season.label(), "summer");
}

#[test]
fn failed_train_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", "1");
    let out = dir.path().join("ens");
    let r = ensdown(&[
        "train", "--predictors", s(&data.join(PREDICTORS_FILE)), "--predictand", s(&data.join(PREDICTAND_FILE)),
        "--out", s(&out), "--train-period", "1900-1950",
    ]);
    assert!(!r.status.success());
    assert!(!out.exists());
    let r = ensdown(&[
        "train", "--predictors", s(&data.join(PREDICTORS_FILE)), "--predictand", s(&data.join(PREDICTAND_FILE)),
        "--out", s(&out), "--learning-rate", "1e300", "--members", "1", "--max-epochs", "3", "--patience", "1",
    ]);
    assert!(!r.status.success());
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("member 0"), "{err}");
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers, ["data"]);
}

#[test]
fn experiment_writes_verdicts_and_a_median_summary() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.json");
    std::fs::write(
        &config,
        r#"{
            "members": 3,
            "split": {"train": {"start_year": 1980, "end_year": 1990},
                      "eval": [{"start_year": 1995, "end_year": 2005}, {"start_year": 2030, "end_year": 2040}],
                      "climatology": {"start_year": 1975, "end_year": 1990}},
            "synth": {"coarse_height": 2, "coarse_width": 2, "fine_height": 4, "fine_width": 4,
                      "start_year": 1975, "end_year": 2040},
            "conv_channels": [6, 4, 3],
            "train": {"max_epochs": 3, "patience": 1}
        }"#,
    )
    .unwrap();
    let out = dir.path().join("exp");
    ok(&["experiment", "--config", s(&config), "--out", s(&out), "--seed", "4", "--repeats", "2"]);
    let verdict: ExperimentVerdict = serde_json::from_slice(&std::fs::read(out.join("verdict.json")).unwrap()).unwrap();
    assert_eq!(verdict.verdicts.len(), 2);
    assert_eq!(verdict.median.seeds, [4, 5]);
    assert_eq!(verdict.periods, ["1995-2005", "2030-2040"]);
    let raw: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("verdict.json")).unwrap()).unwrap();
    for v in raw["verdicts"].as_array().unwrap().iter().chain([&raw["median"]]) {
        for key in ["rmse_gain", "coverage_gain"] {
            assert_eq!(v[key].as_object().unwrap().len(), 2, "{key}");
        }
    }
    assert!(verdict.median.metrics.max_convexity_gap <= 1e-12);
    let m = RunManifest::load(&out).unwrap();
    assert_eq!(m.config["repeats"], 2);
    assert_eq!(m.config["members"], 3);
    assert!(m.artifact_hashes.contains_key("verdict.json"));
    assert!(m.artifact_hashes.keys().any(|k| k.starts_with("repeat_01/ensemble/")));
}
