use dkwt::accounting::{dense_stage_macs, min_stage_macs};
use dkwt::io::{self, ReportFormat, WeightContainer};
use dkwt::model::{delta_forward, dense_forward};
use dkwt::sweep::{self, Engine, Input, Mode, SweepGrid};
use dkwt::{Matrix, ModelConfig, StageId, ThresholdConfig};

fn tiny() -> (ModelConfig, dkwt::EncoderWeights<f32>) {
    let cfg = ModelConfig::tiny();
    let w = io::gen_weights::<f32>(5, &cfg);
    (cfg, w)
}

#[test]
fn saved_fixtures_reproduce_in_memory_results() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, w) = tiny();
    let wpath = dir.path().join("m.dkwt");
    let fpath = dir.path().join("x.dkwf");
    io::save_weights(&wpath, &WeightContainer::new(cfg.clone(), &w).unwrap()).unwrap();
    let f = io::gen_features::<f64>(6, cfg.seq_tokens, cfg.feature_dim, 0.9, 0.0);
    io::save_features(&fpath, &f).unwrap();

    let loaded = io::load_weights(&wpath).unwrap();
    assert_eq!(loaded.weights, w);
    let lf = io::load_features_for(&fpath, &cfg).unwrap();
    assert_eq!(lf, f);

    let t = ThresholdConfig::square_preset();
    let direct = delta_forward(&f, &w.cast::<f64>(), &cfg, &t).unwrap();
    let engine = Engine::from_container(&loaded).unwrap();
    let via = engine.evaluate(&lf, Mode::Delta, &t).unwrap();
    assert_eq!(direct.logits, via.logits);
    assert_eq!(direct.report, via.report);
}

#[test]
fn generated_files_are_byte_stable() {
    let (cfg, w) = tiny();
    let a = io::encode_weights(&WeightContainer::new(cfg.clone(), &w).unwrap()).unwrap();
    let b = io::encode_weights(
        &WeightContainer::new(cfg.clone(), &io::gen_weights::<f32>(5, &cfg)).unwrap(),
    )
    .unwrap();
    assert_eq!(a, b);
}

#[test]
fn dense_report_is_all_hundreds() {
    let (cfg, w) = tiny();
    let engine = Engine::new(cfg.clone(), &w).unwrap();
    let f = io::gen_features(1, cfg.seq_tokens, cfg.feature_dim, 0.2, 0.0);
    let recs = sweep::run(
        &engine,
        &[Input::new("d", f)],
        Mode::Dense,
        &ThresholdConfig::zeros(),
    )
    .unwrap();
    let csv = String::from_utf8(io::render_report(&recs, ReportFormat::Csv).unwrap()).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[1..7], &["", "", "", "", "", ""]);
    assert_eq!(&row[7..12], &["100.00"; 5]);
    assert_eq!(row[12], "1.00");
}

#[test]
fn json_report_carries_layer_breakdown() {
    let (cfg, w) = tiny();
    let engine = Engine::new(cfg.clone(), &w).unwrap();
    let f = io::gen_features(1, cfg.seq_tokens, cfg.feature_dim, 0.9, 0.0);
    let recs = sweep::run(
        &engine,
        &[Input::new("j", f)],
        Mode::Delta,
        &ThresholdConfig::square_preset(),
    )
    .unwrap();
    let bytes = io::render_report(&recs, ReportFormat::Json).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), cfg.layers);
    assert_eq!(v["thresholds"]["theta_softmax"], 0.001);
    let exec: u64 = v["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l["stages"]["proj_qkv"]["executed"].as_u64().unwrap())
        .sum();
    assert_eq!(exec, recs[0].report.stage_total(StageId::ProjQKV).executed);
}

#[test]
fn report_file_only_written_on_success() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.csv");
    let (cfg, w) = tiny();
    let engine = Engine::new(cfg.clone(), &w).unwrap();
    let wrong = Matrix::zeros(cfg.seq_tokens + 1, cfg.feature_dim);
    let res = sweep::run(
        &engine,
        &[Input::new("bad", wrong)],
        Mode::Delta,
        &ThresholdConfig::zeros(),
    )
    .and_then(|r| io::emit_report(&r, ReportFormat::Csv, &path));
    assert!(res.is_err());
    assert!(!path.exists());
}

#[test]
fn extreme_thetas_bracket_executed_fraction() {
    let (cfg, w) = tiny();
    let mut w = w.cast::<f64>();
    w.pos_embed = Matrix::zeros(cfg.seq_len(), cfg.embed_dim);
    let engine = Engine::new(cfg.clone(), &w).unwrap();
    let f = Matrix::filled(cfg.seq_tokens, cfg.feature_dim, 0.4);
    let grid = SweepGrid::explicit(vec![
        ThresholdConfig::zeros(),
        ThresholdConfig::uniform(1e9),
    ])
    .unwrap();
    let rows = sweep::sweep(&engine, &[Input::new("c", f)], &grid, 2).unwrap();
    let min: u64 = StageId::MHSA
        .iter()
        .map(|&s| min_stage_macs(&cfg, s, false).unwrap())
        .sum::<u64>()
        * cfg.layers as u64;
    let dense: u64 = StageId::MHSA
        .iter()
        .map(|&s| dense_stage_macs(&cfg, s, false))
        .sum::<u64>()
        * cfg.layers as u64;
    let frozen = &rows[1].record.report;
    assert_eq!(frozen.mhsa_total().executed, min);
    let lo = min as f64 / dense as f64;
    for r in &rows {
        let frac = r.record.report.total_fraction();
        assert!(frac >= lo - 1e-12 && frac <= 1.0 + 1e-12, "{frac}");
    }
}

#[test]
fn single_precision_stays_close_to_double() {
    let cfg = ModelConfig::kwt3();
    let w = io::gen_weights::<f32>(2, &cfg);
    let f = io::gen_features::<f64>(3, cfg.seq_tokens, cfg.feature_dim, 0.9, 0.0);
    let d = dense_forward(&f, &w.cast::<f64>(), &cfg).unwrap();
    let s = dense_forward(&f.cast::<f32>(), &w, &cfg).unwrap();
    for (a, b) in d.logits.iter().zip(&s.logits) {
        assert!((a - *b as f64).abs() < 1e-3);
    }
}

#[test]
fn retained_deltas_shrink_with_threshold_on_pinned_seeds() {
    use dkwt::accounting::Site;
    let (cfg, w) = tiny();
    let w = w.cast::<f64>();
    for seed in 0..4 {
        let f = io::gen_features::<f64>(40 + seed, cfg.seq_tokens, cfg.feature_dim, 0.8, 0.05);
        let mut last = u64::MAX;
        for theta in [0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let out = delta_forward(&f, &w, &cfg, &ThresholdConfig::uniform(theta)).unwrap();
            let retained: u64 = Site::ALL.iter().map(|&s| out.report.site_total(s).retained).sum();
            assert!(retained <= last, "seed {seed}, theta {theta}: {retained} > {last}");
            last = retained;
        }
    }
}
