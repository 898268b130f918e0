use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dkwt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dkwt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dkwt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    weights: PathBuf,
    features: Vec<PathBuf>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let weights = root.join("tiny.dkwt");
    ok(&[
        "gen",
        "weights",
        "--preset",
        "tiny",
        "--seed",
        "4",
        "--out",
        s(&weights),
    ]);
    let features: Vec<PathBuf> = (0..5)
        .map(|i| {
            let p = root.join(format!("in{i}.dkwf"));
            let seed = (10 + i).to_string();
            ok(&[
                "gen",
                "features",
                "--preset",
                "tiny",
                "--seed",
                &seed,
                "--rho",
                "0.9",
                "--out",
                s(&p),
            ]);
            p
        })
        .collect();
    Fixture {
        _dir: dir,
        root,
        weights,
        features,
    }
}

#[test]
fn gen_is_deterministic() {
    let f = fixture();
    let again = f.root.join("again.dkwt");
    ok(&[
        "gen",
        "weights",
        "--preset",
        "tiny",
        "--seed",
        "4",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(&f.weights).unwrap()
    );
}

#[test]
fn kwt3_preset_has_published_dims() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("k.dkwt");
    ok(&["gen", "weights", "--out", s(&p)]);
    let c = dkwt::io::load_weights(&p).unwrap().config;
    assert_eq!(
        (c.embed_dim, c.mlp_dim, c.heads, c.layers),
        (192, 768, 3, 12)
    );
    assert_eq!((c.seq_tokens, c.feature_dim), (98, 40));
}

#[test]
fn zero_thresholds_match_dense_mode() {
    let f = fixture();
    let w = s(&f.weights);
    let x = s(&f.features[0]);
    let dense_json = f.root.join("dense.json");
    let delta_json = f.root.join("delta.json");
    ok(&[
        "run",
        "--weights",
        w,
        "--features",
        x,
        "--mode",
        "dense",
        "--format",
        "json",
        "--report",
        s(&dense_json),
    ]);
    ok(&[
        "run",
        "--weights",
        w,
        "--features",
        x,
        "--format",
        "json",
        "--report",
        s(&delta_json),
    ]);
    let read = |p: &Path| -> serde_json::Value {
        serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
    };
    let (d, z) = (read(&dense_json), read(&delta_json));
    assert_eq!(d["predicted_class"], z["predicted_class"]);
    let dl: Vec<f64> = serde_json::from_value(d["logits"].clone()).unwrap();
    let zl: Vec<f64> = serde_json::from_value(z["logits"].clone()).unwrap();
    for (a, b) in dl.iter().zip(&zl) {
        assert!((a - b).abs() <= 1e-9);
    }
    assert_eq!(d["pct_total"], "100.00");
}

#[test]
fn preset_sets_square_thresholds() {
    let f = fixture();
    let out = ok(&[
        "run",
        "--weights",
        s(&f.weights),
        "--features",
        s(&f.features[0]),
        "--preset",
        "paper-square",
    ]);
    let row = out.lines().nth(1).unwrap();
    assert!(row.starts_with("in0,0.2,0.2,0.2,0.05,0.001,0.05,"), "{row}");
    let over = ok(&[
        "run",
        "--weights",
        s(&f.weights),
        "--features",
        s(&f.features[0]),
        "--preset",
        "paper-square",
        "--theta-x",
        "0.3",
    ]);
    assert!(over.lines().nth(1).unwrap().starts_with("in0,0.3,0.2,"));
}

#[test]
fn missing_weights_fail_without_report() {
    let f = fixture();
    let report = f.root.join("never.csv");
    let out = dkwt(&[
        "run",
        "--weights",
        s(&f.root.join("missing.dkwt")),
        "--features",
        s(&f.features[0]),
        "--report",
        s(&report),
    ]);
    assert_eq!(out.status.code(), Some(6));
    assert!(!report.exists());
}

#[test]
fn exit_codes_distinguish_error_classes() {
    let f = fixture();
    assert_eq!(dkwt(&["run", "--bogus"]).status.code(), Some(2));

    let corrupt = f.root.join("corrupt.dkwt");
    let mut bytes = std::fs::read(&f.weights).unwrap();
    bytes[0] = b'Q';
    std::fs::write(&corrupt, bytes).unwrap();
    let out = dkwt(&[
        "run",
        "--weights",
        s(&corrupt),
        "--features",
        s(&f.features[0]),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let wrong = f.root.join("wrong.dkwf");
    ok(&[
        "gen",
        "features",
        "--rows",
        "7",
        "--cols",
        "8",
        "--out",
        s(&wrong),
    ]);
    let out = dkwt(&["run", "--weights", s(&f.weights), "--features", s(&wrong)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn sweep_is_byte_identical_across_jobs() {
    let f = fixture();
    let mut args = vec!["sweep", "--weights", s(&f.weights), "--features"];
    args.extend(f.features.iter().map(|p| s(p)));
    args.extend([
        "--preset",
        "paper-square",
        "--theta-x",
        "0,0.1,0.2",
        "--theta-att",
        "0,0.05,0.1",
    ]);
    let one = ok(&[args.as_slice(), &["--jobs", "1"]].concat());
    let eight = ok(&[args.as_slice(), &["--jobs", "8"]].concat());
    assert_eq!(one, eight);
    assert_eq!(one.lines().count(), 1 + 5 * 9);
    assert!(one.lines().next().unwrap().ends_with(",pareto"));
}

#[test]
fn single_cell_sweep_equals_run_row() {
    let f = fixture();
    let x = s(&f.features[1]);
    let run = ok(&[
        "run",
        "--weights",
        s(&f.weights),
        "--features",
        x,
        "--preset",
        "paper-square",
    ]);
    let sweep = ok(&[
        "sweep",
        "--weights",
        s(&f.weights),
        "--features",
        x,
        "--tuple",
        "0.2,0.2,0.2,0.05,0.001,0.05",
    ]);
    let run_row = run.lines().nth(1).unwrap();
    let sweep_row = sweep.lines().nth(1).unwrap();
    assert!(
        sweep_row.starts_with(&format!("{run_row},")),
        "{run_row}\n{sweep_row}"
    );
}

#[test]
fn compare_reports_deviation() {
    let f = fixture();
    let out = ok(&[
        "compare",
        "--weights",
        s(&f.weights),
        "--features",
        s(&f.features[0]),
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["max_logit_dev"].as_f64().unwrap() <= 1e-9);
    let out = ok(&[
        "compare",
        "--weights",
        s(&f.weights),
        "--features",
        s(&f.features[0]),
        "--theta-x",
        "1e9",
        "--theta-q",
        "1e9",
        "--theta-k",
        "1e9",
        "--theta-att",
        "1e9",
        "--theta-softmax",
        "1e9",
        "--theta-head",
        "1e9",
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(v["max_logit_dev"].as_f64().unwrap() > 0.0);
    assert!(v["layers"][0]["sites"]["x"]["candidates"].as_u64().unwrap() > 0);
}

#[test]
fn analyze_dumps_reload() {
    let f = fixture();
    let dumps = f.root.join("dumps");
    let out = ok(&[
        "analyze",
        "--weights",
        s(&f.weights),
        "--features",
        s(&f.features[0]),
        "--dump-dir",
        s(&dumps),
    ]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 3);
    let m = dkwt::io::load_matrix_csv(dumps.join("layer2_x.csv")).unwrap();
    assert_eq!(m.shape(), (17, 32));
}

#[test]
fn csv_features_feed_run() {
    let f = fixture();
    let csv = f.root.join("3_word.csv");
    ok(&[
        "gen",
        "features",
        "--preset",
        "tiny",
        "--seed",
        "1",
        "--out",
        s(&csv),
    ]);
    let out = ok(&[
        "run",
        "--weights",
        s(&f.weights),
        "--features",
        s(&csv),
        "--precision",
        "single",
        "--last-layer-opt",
    ]);
    assert!(out.lines().nth(1).unwrap().starts_with("3_word,"));
}
