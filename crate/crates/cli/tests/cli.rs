use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use cholseq::data::{load_csv, LoadOptions, Normalization, FEATURE_NAMES};
use cholseq::model::{forecast, load_checkpoint};

const HEADER: &str =
    "subject_id,months,ICV,entorhinal,hippocampus,fusiform,midtemporal,ventricles,wholebrain,mmse,adas11,adas13,label";

fn cholseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cholseq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cholseq(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_json(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, json).unwrap();
    p
}

/// Small cohort plus a quick-training config.
fn small_setup(dir: &Path, subjects: usize) -> (PathBuf, PathBuf) {
    let synth = write_json(dir, "synth.json", &format!(r#"{{"n_subjects": {subjects}, "n_visits": 6}}"#));
    let data = dir.join("data").join("cohort.csv");
    ok(&["synth", "--config", s(&synth), "--out", s(&data), "--seed", "3"]);
    let train = write_json(
        dir,
        "train.json",
        r#"{"model": {"channels": 6, "encoder_hidden": 8, "ode_hidden": 12}, "train": {"epochs": 5, "batch_size": 16}}"#,
    );
    (data, train)
}

fn trained(dir: &Path, subjects: usize) -> (PathBuf, PathBuf) {
    let (data, cfg) = small_setup(dir, subjects);
    let out = dir.join("run");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--seed", "1"]);
    (data, out.join("checkpoint.bin"))
}

#[test]
fn synth_writes_the_documented_schema() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cohort.csv");
    ok(&["synth", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next().unwrap(), HEADER);
    assert_eq!(text.lines().count(), 1 + 300 * 10);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["command"], "synth");
    assert_eq!(resolved["settings"]["seed"], 42);
}

#[test]
fn synth_is_byte_identical_per_seed_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["synth", "--out", s(&a), "--seed", "9"]);
    ok(&["synth", "--out", s(&b), "--seed", "9"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let before = fs::read(&a).unwrap();
    let again = cholseq(&["synth", "--out", s(&a), "--seed", "10"]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(fs::read(&a).unwrap(), before);
    ok(&["synth", "--out", s(&a), "--seed", "10", "--force"]);
    assert_ne!(fs::read(&a).unwrap(), before);
}

#[test]
fn synth_with_no_subjects_fails_without_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", r#"{"n_subjects": 0}"#);
    let out = dir.path().join("empty.csv");
    let r = cholseq(&["synth", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!r.status.success());
    assert!(!r.stderr.is_empty());
    assert!(r.stdout.is_empty());
    assert!(!out.exists());
}

#[test]
fn smoke_training_is_fast_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path(), 50);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let start = Instant::now();
        ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--seed", "5"]);
        (out, start.elapsed())
    };
    let (a, ta) = run("a");
    let (b, _) = run("b");
    assert!(ta < Duration::from_secs(60), "took {ta:?}");

    let log = fs::read_to_string(a.join("loss_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "epoch,L_estim,L_pred,penalty,total");
    assert_eq!(lines.count(), 5);
    for f in ["loss_log.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // The resolved configs differ only in the output path.
    let settings = |dir: &Path| {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("config.resolved.json")).unwrap()).unwrap();
        v["settings"].clone()
    };
    assert_eq!(settings(&a), settings(&b));
}

#[test]
fn cross_validation_writes_per_fold_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path(), 30);
    let out = dir.path().join("cv");
    let r = Command::new(env!("CARGO_BIN_EXE_cholseq"))
        .args(["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--folds", "3"])
        .env("CHOLSEQ_THREADS", "2")
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for k in 0..3 {
        let fold = out.join(format!("fold_{k}"));
        for f in ["loss_log.csv", "checkpoint.bin", "report.json", "report.txt"] {
            assert!(fold.join(f).exists(), "fold_{k}/{f}");
        }
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("cv_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["per_fold"].as_array().unwrap().len(), 3);

    let bad = Command::new(env!("CARGO_BIN_EXE_cholseq"))
        .args(["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--folds", "3"])
        .env("CHOLSEQ_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!bad.status.success());
}

#[test]
fn eval_writes_parseable_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), 30);
    let out = dir.path().join("eval");
    let r = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert!(r.stdout.is_empty());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in ["mauc", "recall", "precision", "mape", "r2"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    for score in ["mmse", "adas11", "adas13"] {
        assert!(report["mape"][score].is_number());
    }
    assert!(out.join("report.txt").exists() && out.join("config.resolved.json").exists());
}

#[test]
fn missing_checkpoint_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_setup(dir.path(), 10);
    let missing = dir.path().join("nope.bin");
    let r = cholseq(&["eval", "--data", s(&data), "--checkpoint", s(&missing), "--out", s(dir.path())]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("nope.bin"));
}

#[test]
fn checkpoint_and_data_dimensions_must_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), 20);
    // Drop the ICV column: the checkpoint divides volumes by it.
    let text = fs::read_to_string(&data).unwrap();
    let stripped: String = text
        .lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(2);
            f.join(",") + "\n"
        })
        .collect();
    let no_icv = dir.path().join("no_icv.csv");
    fs::write(&no_icv, stripped).unwrap();
    let r = cholseq(&["eval", "--data", s(&no_icv), "--checkpoint", s(&ckpt), "--out", s(dir.path())]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("ICV"));
}

#[test]
fn impute_passes_observed_cells_through() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path(), 20);
    let full_cfg = write_json(dir.path(), "full.json", r#"{"n_subjects": 8, "n_visits": 4, "missing_rate": 0.0}"#);
    let full = dir.path().join("full.csv");
    ok(&["synth", "--config", s(&full_cfg), "--out", s(&full)]);
    let out = dir.path().join("imputed").join("full_imputed.csv");
    ok(&["impute", "--data", s(&full), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(fs::read_to_string(&full).unwrap(), fs::read_to_string(&out).unwrap());

    // With gaps, every cell comes back filled and observed cells are unchanged.
    let sub = dir.path().join("g");
    fs::create_dir(&sub).unwrap();
    let (gappy, _) = small_setup(&sub, 12);
    let out = dir.path().join("gappy_imputed.csv");
    ok(&["impute", "--data", s(&gappy), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    let opts = LoadOptions {
        min_visits: 1,
        ..LoadOptions::default()
    };
    let before = load_csv(&gappy, &opts).unwrap();
    let after = load_csv(&out, &opts).unwrap();
    assert_eq!(before.len(), after.len());
    for (a, b) in before.sequences.iter().zip(&after.sequences) {
        assert!(b.mask.data().iter().all(|&m| m == 1.0));
        for (k, (&x, &m)) in a.features.data().iter().zip(a.mask.data()).enumerate() {
            if m == 1.0 {
                assert_eq!(x.to_bits(), b.features.data()[k].to_bits());
            }
        }
    }
}

#[test]
fn forecast_grid_rules() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), 20);
    let out = dir.path().join("f0.csv");
    ok(&["forecast", "--data", s(&data), "--checkpoint", s(&ckpt), "--horizon", "0", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let header = format!("subject_id,months,{},p_CN,p_MCI,p_AD", FEATURE_NAMES.join(","));
    assert_eq!(text, header + "\n");

    let none = dir.path().join("none.csv");
    let r = cholseq(&["forecast", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&none)]);
    assert!(!r.status.success());
    assert!(!none.exists());
}

#[test]
fn forecast_matches_the_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path(), 20);
    let out = dir.path().join("forecast.csv");
    ok(&["forecast", "--data", s(&data), "--checkpoint", s(&ckpt), "--horizon", "24", "--out", s(&out)]);

    let cp = load_checkpoint(&ckpt).unwrap();
    let norm: Normalization = cp.normalization.unwrap();
    let opts = LoadOptions {
        min_visits: 1,
        ..LoadOptions::default()
    };
    let cohort = load_csv(&data, &opts).unwrap();
    let grid = [6.0, 12.0, 18.0, 24.0];
    let mut expected: Vec<Vec<f64>> = Vec::new();
    for seq in &cohort.sequences {
        let (scaled, _) = norm.apply(seq).unwrap();
        let icv = norm.icv_for(seq, seq.len());
        for p in forecast(&cp.params, &scaled, &grid).unwrap() {
            let mut row = vec![p.months];
            row.extend(p.features.iter().enumerate().map(|(f, &v)| norm.invert(f, v, icv)));
            row.extend(&p.probs);
            expected.push(row);
        }
    }
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), cohort.len() * grid.len());
    for (r, e) in rows.iter().zip(&expected) {
        let rb: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
        let eb: Vec<u64> = e.iter().map(|v| v.to_bits()).collect();
        assert_eq!(rb, eb);
    }
}

#[test]
fn unknown_config_fields_are_rejected_at_any_depth() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = small_setup(dir.path(), 12);
    let typo = write_json(dir.path(), "typo.json", r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#);
    let out = cholseq(&["train", "--data", s(&data), "--config", s(&typo), "--out", s(&dir.path().join("t"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let synth = write_json(dir.path(), "synth_typo.json", r#"{"n_subject": 5}"#);
    let out = cholseq(&["synth", "--config", s(&synth), "--out", s(&dir.path().join("x.csv"))]);
    assert!(!out.status.success());
}

#[test]
fn regularize_flag_resamples_to_yearly_visits() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = small_setup(dir.path(), 20);
    let out = dir.path().join("yearly");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&out), "--regularize", "yearly"]);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["settings"]["load"]["regularize_yearly"], true);
    assert_eq!(resolved["args"]["regularize"], "yearly");
    assert!(!cholseq(&["train", "--data", s(&data), "--out", s(&out), "--regularize", "monthly"]).status.success());
}
