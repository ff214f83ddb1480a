use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use calibkit::caltask::{build_calibration_dataset, write_calibration_dataset};
use calibkit::calibrator::{apply_calibrator, train_calibrator, train_main_only, train_multitask, MultiTaskModel};
use calibkit::dataset::save_labeled_dataset;
use calibkit::dynamics::{classify_states, compute_trajectory, load_checkpoints, StateThresholds};
use calibkit::metrics::{compute_metrics, reliability_diagram, Binning};
use calibkit::posthoc::{apply_temperature, ensemble_average, fit_temperature};
use calibkit::record::{load_prediction_set_inferred, save_prediction_set, write_prediction_set, PredictionSet};
use calibkit::report;
use calibkit::synth::{gen_calibrated, gen_gaussian_mixture, gen_overconfident, gen_predictable_correctness};
use calibkit::{Activation, MlpCalibrator, TrainConfig, TrainMode};

fn calibkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calibkit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn log_bytes(set: &PredictionSet) -> Vec<u8> {
    let mut buf = Vec::new();
    write_prediction_set(set, &mut buf).unwrap();
    buf
}

#[test]
fn exit_codes() {
    assert_eq!(calibkit(&["--help"]).status.code(), Some(0));
    assert_eq!(calibkit(&["metrics", "--help"]).status.code(), Some(0));
    assert!(stdout(&calibkit(&["synth", "--help"])).contains("--seed"));
    assert_eq!(calibkit(&[]).status.code(), Some(1));
    assert_eq!(calibkit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(calibkit(&["metrics", "--in", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(calibkit(&["metrics", "--in", "x", "--bins", "0"]).status.code(), Some(1));
    assert_eq!(calibkit(&["synth", "--kind", "calibrated", "--n", "5"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.log");
    fs::write(&empty, "").unwrap();
    let o = calibkit(&["metrics", "--in", p(&empty)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty prediction set"), "{}", stderr(&o));

    let bad = dir.path().join("bad.log");
    fs::write(&bad, "{\"id\":\"a\",\"probs\":[0.7,0.3],\"label\":0}\n{\"id\":\"oops\",\"probs\":[0.5,0.3],\"label\":0}\n").unwrap();
    let o = calibkit(&["metrics", "--in", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("oops"));

    let missing = dir.path().join("nope.log");
    assert_eq!(calibkit(&["metrics", "--in", p(&missing)]).status.code(), Some(2));
}

#[test]
fn metrics_and_reliability_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("preds.log");
    let set = gen_overconfident(3_000, 3, 4, 1.8).unwrap();
    save_prediction_set(&set, &log).unwrap();

    let csv = dir.path().join("m.csv");
    let o = calibkit(&["metrics", "--in", p(&log), "--bins", "100", "--binning", "equal-mass", "--csv", p(&csv)]);
    assert_eq!(o.status.code(), Some(0));
    let m = compute_metrics(&set, 100, Binning::EqualMass).unwrap();
    assert_eq!(stdout(&o).trim_end(), report::metrics_summary(&m, false));
    assert_eq!(fs::read_to_string(&csv).unwrap(), report::metrics_csv(&m, false));

    let o = calibkit(&["metrics", "--in", p(&log), "--binning", "equal-width", "--bins", "15", "--percent", "--csv", p(&csv)]);
    let m = compute_metrics(&set, 15, Binning::EqualWidth).unwrap();
    assert_eq!(fs::read_to_string(&csv).unwrap(), report::metrics_csv(&m, true));
    assert_eq!(stdout(&o).trim_end(), report::metrics_summary(&m, true));

    let svg = dir.path().join("r.svg");
    let o = calibkit(&["reliability", "--in", p(&log), "--bins", "10", "--svg", p(&svg)]);
    let bins = reliability_diagram(&set, 10, Binning::EqualMass).unwrap();
    assert_eq!(stdout(&o), report::reliability_csv(&bins, false));
    assert_eq!(fs::read_to_string(&svg).unwrap(), report::reliability_svg(&bins));
    assert!(stdout(&o).starts_with("bin,lo,hi,count,mean_conf,accuracy,gap\n"));
}

#[test]
fn confidence_source_is_selectable() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("o.log");
    let set = gen_calibrated(200, 2, 1)
        .map_records(|r| Ok(r.clone().with_confidence(0.5)))
        .unwrap();
    save_prediction_set(&set, &log).unwrap();
    let auto = stdout(&calibkit(&["metrics", "--in", p(&log)]));
    let max = stdout(&calibkit(&["metrics", "--in", p(&log), "--confidence", "max-prob"]));
    assert!(auto.contains("conf=0.500000"));
    let m = compute_metrics(&set.without_overrides(), 100, Binning::EqualMass).unwrap();
    assert_eq!(max.trim_end(), report::metrics_summary(&m, false));
}

#[test]
fn temperature_commands_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let val = dir.path().join("val.log");
    let set = gen_overconfident(20_000, 4, 2, 2.0).unwrap();
    save_prediction_set(&set, &val).unwrap();

    let o = calibkit(&["fit-temperature", "--val", p(&val)]);
    assert_eq!(o.status.code(), Some(0));
    let line = stdout(&o);
    let t: f64 = line
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("T="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((t - 2.0).abs() <= 0.1, "{line}");
    let fit = fit_temperature(&set, 0.05, 20.0, 1e-4).unwrap();
    assert_eq!(t, fit.temperature);

    let out = dir.path().join("scaled.log");
    let o = calibkit(&["apply-temperature", "--in", p(&val), "--t", "1.5", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&out).unwrap(), log_bytes(&apply_temperature(&set, 1.5).unwrap()));

    assert_eq!(calibkit(&["apply-temperature", "--in", p(&val), "--t", "0"]).status.code(), Some(2));

    let no_logits = dir.path().join("nl.log");
    fs::write(&no_logits, "{\"id\":\"a\",\"probs\":[0.7,0.3],\"label\":0}\n").unwrap();
    let o = calibkit(&["fit-temperature", "--val", p(&no_logits)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`a`"));
}

#[test]
fn ensemble_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let sets: Vec<PredictionSet> = (1..=3).map(|s| gen_overconfident(100, 3, 5, 1.0 + s as f64).unwrap()).collect();
    let paths: Vec<_> = (0..3).map(|i| dir.path().join(format!("m{i}.log"))).collect();
    for (s, path) in sets.iter().zip(&paths) {
        save_prediction_set(s, path).unwrap();
    }
    let o = calibkit(&["ensemble", p(&paths[0]), p(&paths[1]), p(&paths[2])]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(o.stdout, log_bytes(&ensemble_average(&sets).unwrap()));

    let other = dir.path().join("other.log");
    save_prediction_set(&gen_calibrated(50, 3, 1), &other).unwrap();
    assert_eq!(calibkit(&["ensemble", p(&paths[0]), p(&other)]).status.code(), Some(2));
}

#[test]
fn calibrator_pipeline_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("pc.log");
    let o = calibkit(&["synth", "--kind", "predictable-correctness", "--n", "600", "--dim", "4", "--margin", "3", "--seed", "8", "--out", p(&log)]);
    assert_eq!(o.status.code(), Some(0));
    let set = gen_predictable_correctness(600, 4, 8, 3.0).unwrap();
    assert_eq!(fs::read(&log).unwrap(), log_bytes(&set));

    let cal = dir.path().join("cal.jsonl");
    let o = calibkit(&["build-caltask", "--in", p(&log), "--seed", "3", "--out", p(&cal)]);
    assert_eq!(o.status.code(), Some(0));
    let ds = build_calibration_dataset(&set, 3, true).unwrap();
    let mut expected = Vec::new();
    write_calibration_dataset(&ds, &mut expected).unwrap();
    assert_eq!(fs::read(&cal).unwrap(), expected);

    let model = dir.path().join("m.txt");
    let o = calibkit(&[
        "train-calibrator", "--data", p(&cal), "--hidden", "16,8", "--activation", "tanh", "--lr", "0.2",
        "--epochs", "10", "--batch-size", "16", "--seed", "4", "--label-smoothing", "0.05", "--out", p(&model),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let init = MlpCalibrator::init(&[4, 16, 8, 1], Activation::Tanh, 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.2,
        cal_learning_rate: None,
        epochs: 10,
        batch_size: 16,
        seed: 4,
        label_smoothing_epsilon: 0.05,
        mode: TrainMode::Extrinsic,
    };
    let (trained, _) = train_calibrator(&init, &ds, &cfg).unwrap();
    assert_eq!(fs::read_to_string(&model).unwrap(), trained.to_text());

    let o = calibkit(&["apply-calibrator", "--model", p(&model), "--in", p(&log)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(o.stdout, log_bytes(&apply_calibrator(&trained, &set).unwrap()));

    let plain = dir.path().join("plain.log");
    save_prediction_set(&gen_calibrated(10, 2, 0), &plain).unwrap();
    let o = calibkit(&["apply-calibrator", "--model", p(&model), "--in", p(&plain)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no features"));
}

#[test]
fn multitask_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_gaussian_mixture(600, 3, 2, 6, 1.5).unwrap();
    let (main, rest) = data.split_at(300);
    let (val, eval) = rest.split_at(150);
    let init = MultiTaskModel::init(2, &[8], 3, Activation::Relu, 6).unwrap();
    let cal = build_calibration_dataset(&init.predict_with_inputs(&val).unwrap(), 6, false).unwrap();

    let main_p = dir.path().join("main.jsonl");
    let eval_p = dir.path().join("eval.jsonl");
    let cal_p = dir.path().join("cal.jsonl");
    save_labeled_dataset(&main, &main_p).unwrap();
    save_labeled_dataset(&eval, &eval_p).unwrap();
    calibkit::export_calibration_dataset(&cal, &cal_p).unwrap();

    let model_p = dir.path().join("mt.txt");
    let o = calibkit(&[
        "train-multitask", "--mode", "simultaneous", "--main", p(&main_p), "--cal", p(&cal_p), "--eval", p(&eval_p),
        "--model-out", p(&model_p), "--hidden", "8", "--epochs", "4", "--lr", "0.1", "--seed", "6",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let cfg = TrainConfig {
        epochs: 4,
        seed: 6,
        mode: TrainMode::Simultaneous,
        ..TrainConfig::default()
    };
    let (model, _) = train_multitask(&init, &main, &cal, &cfg).unwrap();
    assert_eq!(fs::read_to_string(&model_p).unwrap(), model.to_text());
    assert_eq!(o.stdout, log_bytes(&model.predict(&eval).unwrap()));
}

#[test]
fn main_only_warm_up_logs_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let main = gen_gaussian_mixture(200, 3, 2, 4, 2.0).unwrap();
    let val = gen_gaussian_mixture(90, 3, 2, 5, 2.0).unwrap();
    let main_p = dir.path().join("main.jsonl");
    let val_p = dir.path().join("val.jsonl");
    save_labeled_dataset(&main, &main_p).unwrap();
    save_labeled_dataset(&val, &val_p).unwrap();

    let o = calibkit(&[
        "train-multitask", "--main", p(&main_p), "--eval", p(&val_p), "--input-features", "--hidden", "8",
        "--epochs", "3", "--seed", "4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let init = MultiTaskModel::init(2, &[8], 3, Activation::Relu, 4).unwrap();
    let cfg = TrainConfig { epochs: 3, seed: 4, ..TrainConfig::default() };
    let (model, _) = train_main_only(&init, &main, &cfg).unwrap();
    let expected = model.predict_with_inputs(&val).unwrap();
    assert_eq!(o.stdout, log_bytes(&expected));
    assert_eq!(expected.records()[0].features.as_deref(), Some(val.points()[0].features.as_slice()));
}

#[test]
fn toy_run_and_dynamics_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    let o = calibkit(&[
        "synth", "--kind", "toy-run", "--n", "60", "--heldout", "100", "--classes", "3", "--dim", "2",
        "--separation", "1.5", "--hidden", "16", "--epochs", "12", "--batch-size", "60", "--lr", "0.1",
        "--seed", "2", "--out-dir", p(&ck),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "checkpoints=12");

    let csv = dir.path().join("traj.csv");
    let o = calibkit(&["dynamics", "--dir", p(&ck), "--bins", "20", "--out", p(&csv)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let checkpoints = load_checkpoints(&ck).unwrap();
    let traj = compute_trajectory(&checkpoints, 20, Binning::EqualMass).unwrap();
    let states = classify_states(&traj, &StateThresholds::default()).unwrap();
    assert_eq!(fs::read_to_string(&csv).unwrap(), report::trajectory_csv(&traj, Some(&states), false));
    assert!(stdout(&o).starts_with("transition_step="));

    let first = load_prediction_set_inferred(ck.join("step_1.jsonl")).unwrap();
    assert_eq!(first.len(), 100);
    assert!(first.records().iter().all(|r| r.step == Some(1) && r.features.is_none()));
}

#[test]
fn synth_outputs_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.log");
    calibkit(&["synth", "--kind", "calibrated", "--n", "50", "--classes", "4", "--seed", "9", "--out", p(&out)]);
    assert_eq!(fs::read(&out).unwrap(), log_bytes(&gen_calibrated(50, 4, 9)));

    let o = calibkit(&["synth", "--kind", "overconfident", "--n", "50", "--scale", "3", "--seed", "9"]);
    assert_eq!(o.stdout, log_bytes(&gen_overconfident(50, 2, 9, 3.0).unwrap()));

    let o = calibkit(&["synth", "--kind", "overconfident", "--n", "50", "--scale", "1", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(2));

    let mix = dir.path().join("mix.jsonl");
    let o = calibkit(&["synth", "--kind", "gaussian-mixture", "--n", "30", "--classes", "3", "--dim", "4", "--seed", "1", "--out", p(&mix)]);
    assert_eq!(o.status.code(), Some(0));
    let expected = dir.path().join("expected.jsonl");
    save_labeled_dataset(&gen_gaussian_mixture(30, 3, 4, 1, 3.0).unwrap(), &expected).unwrap();
    assert_eq!(fs::read(&mix).unwrap(), fs::read(&expected).unwrap());
}

#[test]
fn in_process_run_uses_the_same_contract() {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = calibkit_cli::run(["calibkit", "metrics"], &mut out, &mut err);
    assert_eq!(code, calibkit_cli::EXIT_USAGE);
    assert!(String::from_utf8(err).unwrap().contains("--in"));
    let mut out = Vec::new();
    let code = calibkit_cli::run(["calibkit", "--help"], &mut out, &mut Vec::new());
    assert_eq!(code, calibkit_cli::EXIT_OK);
    assert!(String::from_utf8(out).unwrap().contains("fit-temperature"));
}
