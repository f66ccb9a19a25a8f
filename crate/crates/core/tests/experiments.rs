use std::path::{Path, PathBuf};

use misslayer::experiments::{run_experiment, ExperimentConfig, Method, Metrics, MetricsReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn temp_dir() -> PathBuf {
    let dir = std::env::temp_dir().join(format!("misslayer-exp-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Two well separated 3-D classes with some cells already missing.
fn blobs_csv(path: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut text = String::new();
    for i in 0..60 {
        let c = i % 2;
        let off = if c == 0 { -2.0 } else { 2.0 };
        let cells: Vec<String> = (0..3)
            .map(|j| {
                if (i + j) % 9 == 0 {
                    "?".into()
                } else {
                    format!("{}", off + rng.gen_range(-0.7..0.7))
                }
            })
            .collect();
        text += &format!("{},{}\n", cells.join(","), if c == 0 { "a" } else { "b" });
    }
    std::fs::write(path, text).unwrap();
}

fn classify_config(kind: &str, csv: &Path) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "experiment": "{kind}",
            "dataset": {{"format": "csv", "path": {path:?}, "label_column": "last"}},
            "methods": ["generalized", "mean", "knn", "dropout", "gmm-sample"],
            "missing_levels": [0.2],
            "hidden": [6, 4],
            "rbf_units": [4, 6],
            "train": {{"batch_size": 8, "epochs": 15, "optimizer": {{"kind": "adam", "lr": 0.02, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}}}},
            "density": {{"k_candidates": [2, 3]}},
            "cv": {{"outer_folds": 3, "inner_folds": 2}},
            "normalization": "zscore",
            "knn_k": 3,
            "seed": 5
        }}"#,
        path = csv.display().to_string()
    ))
    .unwrap()
}

fn strip_clock(mut r: MetricsReport) -> MetricsReport {
    r.wall_clock_secs = 0.0;
    r
}

#[test]
fn mlp_run_is_paired_deterministic_and_round_trips() {
    let dir = temp_dir();
    let csv = dir.join("blobs.csv");
    blobs_csv(&csv);
    let cfg = classify_config("mlp-classify", &csv);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(strip_clock(a.clone()).to_json().unwrap(), strip_clock(b).to_json().unwrap());
    assert_eq!(a.config, cfg);
    assert_eq!(a.results.len(), 5);
    for r in &a.results {
        assert_eq!(r.folds.len(), 3);
        assert_eq!(r.missing_level, Some(0.2));
        let mean = Metrics::mean(&r.folds.iter().map(|f| f.metrics.clone()).collect::<Vec<_>>());
        assert_eq!(r.aggregate, mean);
        let acc = r.aggregate.accuracy.unwrap();
        assert!(acc > 0.8, "{} accuracy {acc}", r.method.name());
    }
    let g = a.result(Method::Generalized, Some(0.2)).unwrap();
    assert!(g.folds.iter().all(|f| matches!(f.selected_k, Some(2 | 3))));

    // write -> read -> write is byte-identical
    let path = dir.join("report.json");
    std::fs::write(&path, a.to_json().unwrap()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back = MetricsReport::from_json(&text).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_json().unwrap(), text);
}

#[test]
fn rbfn_run_selects_units_from_the_grid() {
    let dir = temp_dir();
    let csv = dir.join("blobs-rbf.csv");
    blobs_csv(&csv);
    let mut cfg = classify_config("rbfn-classify", &csv);
    cfg.methods = vec![Method::Generalized, Method::Mean];
    cfg.missing_levels.clear();
    let r = run_experiment(&cfg).unwrap();
    for m in &r.results {
        assert!(m.folds.iter().all(|f| matches!(f.selected_units, Some(4 | 6))));
        assert!(m.aggregate.accuracy.unwrap() > 0.8);
    }
}

#[test]
fn shuffled_labels_fall_to_chance() {
    let dir = temp_dir();
    let csv = dir.join("blobs-null.csv");
    blobs_csv(&csv);
    let mut cfg = classify_config("mlp-classify", &csv);
    cfg.methods = vec![Method::Mean];
    cfg.shuffle_labels = true;
    cfg.cv.inner_folds = 0;
    let r = run_experiment(&cfg).unwrap();
    assert!(r.results[0].aggregate.accuracy.unwrap() < 0.75);
}

#[test]
fn autoencoder_errors_decompose_on_digits() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    let images = data.join("digits-images-idx3-ubyte.gz");
    if !images.exists() {
        eprintln!("digit files absent; skipping");
        return;
    }
    let pgm = temp_dir().join("pgm");
    let cfg = ExperimentConfig::from_json(&format!(
        r#"{{
            "experiment": "autoencoder",
            "dataset": {{"format": "idx", "images": {:?}, "labels": {:?}}},
            "mask": {{"kind": "patch", "h": 13, "w": 13, "grid_h": 28, "grid_w": 28, "seed": 7}},
            "methods": ["generalized", "mean", "dropout"],
            "hidden": [16, 8, 16],
            "train": {{"batch_size": 16, "epochs": 1}},
            "density": {{"k_candidates": [2], "em_max_iter": 5}},
            "autoencoder": {{"train_size": 60, "test_size": 12, "pgm_dir": {:?}, "pgm_count": 2}},
            "seed": 1
        }}"#,
        images.display().to_string(),
        data.join("digits-labels-idx1-ubyte.gz").display().to_string(),
        pgm.display().to_string()
    ))
    .unwrap();
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.results.len(), 3);
    for m in &r.results {
        let a = &m.aggregate;
        let (t, i, o) = (a.mse_total.unwrap(), a.mse_inside.unwrap(), a.mse_outside.unwrap());
        assert!((t - (i + o)).abs() <= 1e-15 * t.max(1.0));
        assert!(i > 0.0 && o > 0.0);
    }
    assert!(pgm.join("001_generalized.pgm").exists() && pgm.join("000_masked.pgm").exists());
}

#[test]
fn toy_run_is_deterministic() {
    let cfg = ExperimentConfig::from_json(
        r#"{"experiment": "toy-density", "methods": ["generalized"],
            "toy": {"n_train": 200, "n_test": 200},
            "density": {"k_candidates": [2]},
            "train": {"batch_size": 16, "epochs": 3}, "seed": 3}"#,
    )
    .unwrap();
    let a = strip_clock(run_experiment(&cfg).unwrap());
    let b = strip_clock(run_experiment(&cfg).unwrap());
    assert_eq!(a, b);
    let d = a.density.as_ref().unwrap();
    assert_ne!(d.initial, d.joint, "joint training should move the density");
}

#[test]
fn bad_configs_are_config_errors() {
    let base = r#"{"experiment": "mlp-classify", "methods": [], "train": {"batch_size": 8, "epochs": 1},
                   "dataset": {"format": "csv", "path": "/nonexistent.csv"}}"#;
    let cfg = ExperimentConfig::from_json(base).unwrap();
    assert!(matches!(run_experiment(&cfg), Err(misslayer::Error::Config(_))));
    assert!(ExperimentConfig::from_json(r#"{"experiment": "toy-density"}"#).is_err());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if ["verify.json", "bench.json", "impute_knn.json"].contains(&name.as_str()) {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.train.validate().unwrap();
        seen += 1;
    }
    assert!(seen >= 5);
}
