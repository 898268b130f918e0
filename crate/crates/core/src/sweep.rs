//! Drivers behind the command line: single runs, threshold sweeps,
//! dense-vs-delta comparison and correlation analysis.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use serde::Serialize;

use crate::accounting::Site;
use crate::analysis::{row_delta_tensor, subthreshold_fraction, CorrelationStats};
use crate::io::{
    fmt_pct, fmt_speedup, save_matrix_csv, RunRecord, WeightContainer, REPORT_COLUMNS,
};
use crate::model::{classify, delta_forward, dense_forward, dense_forward_traced, ForwardOutput};
use crate::par::map_tasks;
use crate::{
    EncoderWeights, Error, MacReport, Matrix, ModelConfig, Precision, Real, Result, ThresholdConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dense,
    Delta,
}

/// A loaded model ready to evaluate in the configured precision.
#[derive(Debug, Clone)]
pub struct Engine {
    config: ModelConfig,
    double: EncoderWeights<f64>,
    single: EncoderWeights<f32>,
}

/// Result of one forward pass, logits widened to double.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub logits: Vec<f64>,
    pub report: MacReport,
    pub predicted_class: usize,
}

fn widen<T: Real>(out: ForwardOutput<T>) -> Result<Evaluation> {
    let predicted_class = classify(&out.logits)?;
    Ok(Evaluation {
        logits: out.logits.iter().map(|v| v.as_f64()).collect(),
        report: out.report,
        predicted_class,
    })
}

impl Engine {
    pub fn new<T: Real>(config: ModelConfig, weights: &EncoderWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self {
            config,
            double: weights.cast(),
            single: weights.cast(),
        })
    }

    pub fn from_container(c: &WeightContainer) -> Result<Self> {
        Self::new(c.config.clone(), &c.weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &EncoderWeights<f64> {
        &self.double
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.config.precision = precision;
        self
    }

    pub fn with_last_layer_opt(mut self, on: bool) -> Self {
        self.config.last_layer_opt = on;
        self
    }

    fn check_features(&self, features: &Matrix<f64>) -> Result<()> {
        let want = (self.config.seq_tokens, self.config.feature_dim);
        if features.shape() != want {
            return Err(Error::shape("features", features.shape(), want));
        }
        Ok(())
    }

    pub fn evaluate(
        &self,
        features: &Matrix<f64>,
        mode: Mode,
        thresholds: &ThresholdConfig,
    ) -> Result<Evaluation> {
        self.check_features(features)?;
        match (self.config.precision, mode) {
            (Precision::Double, Mode::Dense) => {
                widen(dense_forward(features, &self.double, &self.config)?)
            }
            (Precision::Double, Mode::Delta) => widen(delta_forward(
                features,
                &self.double,
                &self.config,
                thresholds,
            )?),
            (Precision::Single, Mode::Dense) => {
                widen(dense_forward(&features.cast(), &self.single, &self.config)?)
            }
            (Precision::Single, Mode::Delta) => widen(delta_forward(
                &features.cast(),
                &self.single,
                &self.config,
                thresholds,
            )?),
        }
    }
}

/// A named feature sequence.
#[derive(Debug, Clone)]
pub struct Input {
    pub id: String,
    pub features: Matrix<f64>,
}

impl Input {
    pub fn new(id: impl Into<String>, features: Matrix<f64>) -> Self {
        Self {
            id: id.into(),
            features,
        }
    }
}

/// Class label carried by an input id of the form `<integer>_<anything>`.
pub fn label_from_id(id: &str) -> Option<usize> {
    let (head, _) = id.split_once('_')?;
    if head.is_empty() || !head.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    head.parse().ok()
}

/// Evaluate each input once.
pub fn run(
    engine: &Engine,
    inputs: &[Input],
    mode: Mode,
    thresholds: &ThresholdConfig,
) -> Result<Vec<RunRecord>> {
    if mode == Mode::Delta {
        thresholds.validate()?;
    }
    inputs
        .iter()
        .map(|input| {
            let e = engine.evaluate(&input.features, mode, thresholds)?;
            Ok(RunRecord {
                input_id: input.id.clone(),
                thresholds: (mode == Mode::Delta).then_some(*thresholds),
                report: e.report,
                logits: e.logits,
                predicted_class: e.predicted_class,
            })
        })
        .collect()
}

fn cmp_tuples(a: &ThresholdConfig, b: &ThresholdConfig) -> Ordering {
    a.to_array()
        .iter()
        .zip(b.to_array().iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Threshold tuples to evaluate, kept sorted and free of duplicates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    tuples: Vec<ThresholdConfig>,
}

impl SweepGrid {
    /// Cross product of per-site value lists, in site order
    /// `x, q, k, att, softmax, head`.
    pub fn cross(lists: [Vec<f64>; 6]) -> Result<Self> {
        let mut tuples = vec![[0.0f64; 6]];
        for (site, values) in lists.iter().enumerate() {
            if values.is_empty() {
                return Err(Error::Empty("threshold list"));
            }
            tuples = tuples
                .into_iter()
                .flat_map(|t| {
                    values.iter().map(move |&v| {
                        let mut t = t;
                        t[site] = v;
                        t
                    })
                })
                .collect();
        }
        Self::explicit(
            tuples
                .into_iter()
                .map(ThresholdConfig::from_array)
                .collect(),
        )
    }

    pub fn explicit(mut tuples: Vec<ThresholdConfig>) -> Result<Self> {
        if tuples.is_empty() {
            return Err(Error::Empty("sweep grid"));
        }
        for t in &tuples {
            t.validate()?;
        }
        tuples.sort_by(cmp_tuples);
        tuples.dedup_by(|a, b| cmp_tuples(a, b).is_eq());
        Ok(Self { tuples })
    }

    pub fn tuples(&self) -> &[ThresholdConfig] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub record: RunRecord,
    pub dense_class: usize,
    pub max_logit_dev: f64,
    pub mean_logit_dev: f64,
    pub correct: Option<bool>,
    pub pareto: bool,
}

/// Extra columns of the sweep CSV after the run columns.
pub const SWEEP_EXTRA_COLUMNS: [&str; 5] = [
    "dense_class",
    "max_logit_dev",
    "mean_logit_dev",
    "correct",
    "pareto",
];

fn deviations(a: &[f64], b: &[f64]) -> (f64, f64) {
    let max = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let mean = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64;
    (max, mean)
}

/// Indices of non-dominated points, minimising both coordinates.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(a, b)| {
            !points
                .iter()
                .any(|&(c, d)| c <= a && d <= b && (c < a || d < b))
        })
        .collect()
}

/// Evaluate every input under every tuple. Rows come back sorted by input id,
/// then tuple; the output does not depend on `jobs`.
///
/// The Pareto flag is computed per tuple over the mean executed fraction and
/// an error proxy averaged over inputs: classification error when every
/// input id carries a label, otherwise the maximum logit deviation from the
/// dense pass.
pub fn sweep(
    engine: &Engine,
    inputs: &[Input],
    grid: &SweepGrid,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if inputs.is_empty() {
        return Err(Error::Empty("sweep inputs"));
    }
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let mut order: Vec<&Input> = inputs.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let ids: BTreeSet<&str> = order.iter().map(|i| i.id.as_str()).collect();
    if ids.len() != order.len() {
        return Err(Error::Config("duplicate input ids in sweep".into()));
    }
    let jobs = jobs.max(1);

    let dense = map_tasks(order.clone(), jobs, |input| {
        engine.evaluate(&input.features, Mode::Dense, &ThresholdConfig::zeros())
    })?;

    let tasks: Vec<(usize, usize)> = (0..order.len())
        .flat_map(|i| (0..grid.len()).map(move |t| (i, t)))
        .collect();
    let results = map_tasks(tasks.clone(), jobs, |(i, t)| {
        engine.evaluate(&order[i].features, Mode::Delta, &grid.tuples()[t])
    })?;

    let labels: Vec<Option<usize>> = order.iter().map(|i| label_from_id(&i.id)).collect();
    let labelled = labels.iter().all(Option::is_some);

    let mut rows = Vec::with_capacity(results.len());
    for (&(i, t), e) in tasks.iter().zip(results) {
        let (max_dev, mean_dev) = deviations(&e.logits, &dense[i].logits);
        rows.push(SweepRow {
            dense_class: dense[i].predicted_class,
            max_logit_dev: max_dev,
            mean_logit_dev: mean_dev,
            correct: labels[i].map(|l| l == e.predicted_class),
            pareto: false,
            record: RunRecord {
                input_id: order[i].id.clone(),
                thresholds: Some(grid.tuples()[t]),
                report: e.report,
                logits: e.logits,
                predicted_class: e.predicted_class,
            },
        });
    }

    let n_inputs = order.len() as f64;
    let mut points = vec![(0.0f64, 0.0f64); grid.len()];
    for (&(_, t), row) in tasks.iter().zip(&rows) {
        let err = if labelled {
            if row.correct == Some(true) {
                0.0
            } else {
                1.0
            }
        } else {
            row.max_logit_dev
        };
        points[t].0 += err / n_inputs;
        points[t].1 += row.record.report.total_fraction() / n_inputs;
    }
    let front = pareto_front(&points);
    for (&(_, t), row) in tasks.iter().zip(rows.iter_mut()) {
        row.pareto = front[t];
    }
    Ok(rows)
}

pub fn render_sweep_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(REPORT_COLUMNS.iter().chain(SWEEP_EXTRA_COLUMNS.iter()))
        .map_err(csv_err)?;
    for row in rows {
        let mut cells = row.record.csv_cells();
        cells.push(row.dense_class.to_string());
        cells.push(format!("{:.6e}", row.max_logit_dev));
        cells.push(format!("{:.6e}", row.mean_logit_dev));
        cells.push(
            row.correct
                .map(|c| u8::from(c).to_string())
                .unwrap_or_default(),
        );
        cells.push(u8::from(row.pareto).to_string());
        w.write_record(cells).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Csv(e.to_string()))
}

/// Dense vs delta on one input.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub input_id: String,
    pub thresholds: ThresholdConfig,
    pub dense: Evaluation,
    pub delta: Evaluation,
    pub max_logit_dev: f64,
    pub mean_logit_dev: f64,
}

pub fn compare(engine: &Engine, input: &Input, thresholds: &ThresholdConfig) -> Result<Comparison> {
    thresholds.validate()?;
    let dense = engine.evaluate(&input.features, Mode::Dense, thresholds)?;
    let delta = engine.evaluate(&input.features, Mode::Delta, thresholds)?;
    let (max_logit_dev, mean_logit_dev) = deviations(&delta.logits, &dense.logits);
    Ok(Comparison {
        input_id: input.id.clone(),
        thresholds: *thresholds,
        dense,
        delta,
        max_logit_dev,
        mean_logit_dev,
    })
}

impl Comparison {
    pub fn to_json(&self) -> serde_json::Value {
        let layers: Vec<_> = self
            .delta
            .report
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let sites: serde_json::Map<_, _> = Site::ALL
                    .iter()
                    .map(|&s| {
                        let c = l.sites[s.index()];
                        (s.name().to_string(), serde_json::json!({"retained": c.retained, "candidates": c.candidates}))
                    })
                    .collect();
                serde_json::json!({ "layer": i, "sites": sites, "softmax_fallbacks": l.softmax_fallbacks })
            })
            .collect();
        serde_json::json!({
            "input_id": self.input_id,
            "thresholds": self.thresholds.to_array(),
            "max_logit_dev": self.max_logit_dev,
            "mean_logit_dev": self.mean_logit_dev,
            "dense_class": self.dense.predicted_class,
            "delta_class": self.delta.predicted_class,
            "dense_logits": self.dense.logits,
            "delta_logits": self.delta.logits,
            "pct_total": fmt_pct(self.delta.report.total_fraction()),
            "speedup": fmt_speedup(self.delta.report.speedup()),
            "layers": layers,
        })
    }
}

/// Correlation statistics for one layer.
#[derive(Debug, Clone, Serialize)]
pub struct LayerAnalysis {
    pub layer: usize,
    /// Attention block input.
    pub x: CorrelationStats,
    /// Softmax output, per head.
    pub softmax: Vec<CorrelationStats>,
}

/// Dense pass in double precision with per-layer statistics. When `dump_dir`
/// is given, every captured tensor and its row deltas are written as CSV
/// matrices named `layer{i}_x.csv`, `layer{i}_x_delta.csv`,
/// `layer{i}_softmax_h{h}.csv` and `layer{i}_softmax_h{h}_delta.csv`.
pub fn analyze(
    engine: &Engine,
    input: &Input,
    pct: f64,
    dump_dir: Option<&Path>,
) -> Result<Vec<LayerAnalysis>> {
    if !(pct >= 0.0 && pct.is_finite()) {
        return Err(Error::Config(format!(
            "percentage must be finite and non-negative, got {pct}"
        )));
    }
    engine.check_features(&input.features)?;
    let (_, traces) = dense_forward_traced(&input.features, engine.weights(), engine.config())?;
    let dump = |name: String, m: &Matrix<f64>| -> Result<()> {
        if let Some(dir) = dump_dir {
            save_matrix_csv(dir.join(&name), m)?;
            if let Ok(d) = row_delta_tensor(m, 1) {
                save_matrix_csv(dir.join(name.replace(".csv", "_delta.csv")), &d)?;
            }
        }
        Ok(())
    };
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = Vec::with_capacity(traces.len());
    for (i, t) in traces.iter().enumerate() {
        dump(format!("layer{i}_x.csv"), &t.mhsa_input)?;
        let mut softmax = Vec::with_capacity(t.softmax.len());
        for (h, p) in t.softmax.iter().enumerate() {
            dump(format!("layer{i}_softmax_h{h}.csv"), p)?;
            softmax.push(subthreshold_fraction(p, pct));
        }
        out.push(LayerAnalysis {
            layer: i,
            x: subthreshold_fraction(&t.mhsa_input, pct),
            softmax,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{gen_features, gen_weights};

    fn tiny_engine() -> Engine {
        let cfg = ModelConfig::tiny();
        Engine::new(cfg.clone(), &gen_weights::<f32>(3, &cfg)).unwrap()
    }

    fn inputs(engine: &Engine, n: usize, rho: f64) -> Vec<Input> {
        let c = engine.config();
        (0..n)
            .map(|i| {
                Input::new(
                    format!("in{i}"),
                    gen_features(100 + i as u64, c.seq_tokens, c.feature_dim, rho, 0.05),
                )
            })
            .collect()
    }

    #[test]
    fn labels_from_ids() {
        assert_eq!(label_from_id("3_yes_001"), Some(3));
        assert_eq!(label_from_id("12_x"), Some(12));
        assert_eq!(label_from_id("yes_3"), None);
        assert_eq!(label_from_id("3yes"), None);
        assert_eq!(label_from_id("_3"), None);
    }

    #[test]
    fn grid_cross_product_sorted() {
        let g = SweepGrid::cross([
            vec![0.2, 0.0],
            vec![0.1],
            vec![0.1],
            vec![0.05, 0.0],
            vec![0.001],
            vec![0.05],
        ])
        .unwrap();
        assert_eq!(g.len(), 4);
        assert_eq!(g.tuples()[0].theta_x, 0.0);
        assert_eq!(g.tuples()[0].theta_att, 0.0);
        assert_eq!(g.tuples()[3].theta_x, 0.2);
        assert!(SweepGrid::cross([
            vec![],
            vec![0.0],
            vec![0.0],
            vec![0.0],
            vec![0.0],
            vec![0.0]
        ])
        .is_err());
        assert!(SweepGrid::explicit(vec![]).is_err());
        assert!(SweepGrid::explicit(vec![ThresholdConfig::uniform(-1.0)]).is_err());
        let dup = SweepGrid::explicit(vec![ThresholdConfig::zeros(); 3]).unwrap();
        assert_eq!(dup.len(), 1);
    }

    #[test]
    fn pareto_front_marks_non_dominated() {
        let f = pareto_front(&[(0.0, 1.0), (1.0, 0.0), (1.0, 1.0), (0.5, 0.5), (0.0, 1.0)]);
        assert_eq!(f, vec![true, true, false, true, true]);
    }

    #[test]
    fn single_cell_sweep_matches_run() {
        let e = tiny_engine();
        let ins = inputs(&e, 1, 0.9);
        let t = ThresholdConfig::square_preset();
        let rows = sweep(&e, &ins, &SweepGrid::explicit(vec![t]).unwrap(), 1).unwrap();
        let run_rows = run(&e, &ins, Mode::Delta, &t).unwrap();
        assert_eq!(rows[0].record.csv_cells(), run_rows[0].csv_cells());
        assert!(rows[0].pareto);
    }

    #[test]
    fn sweep_is_independent_of_jobs() {
        let e = tiny_engine();
        let ins = inputs(&e, 3, 0.8);
        let g = SweepGrid::cross([
            vec![0.0, 0.1, 0.3],
            vec![0.1],
            vec![0.1],
            vec![0.0, 0.05],
            vec![0.001],
            vec![0.05],
        ])
        .unwrap();
        let a = render_sweep_csv(&sweep(&e, &ins, &g, 1).unwrap()).unwrap();
        let b = render_sweep_csv(&sweep(&e, &ins, &g, 4).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 3 * 6);
    }

    #[test]
    fn sweep_rejects_duplicates_and_empties() {
        let e = tiny_engine();
        let mut ins = inputs(&e, 2, 0.5);
        let g = SweepGrid::explicit(vec![ThresholdConfig::zeros()]).unwrap();
        assert!(sweep(&e, &[], &g, 1).is_err());
        ins[1].id = ins[0].id.clone();
        assert!(sweep(&e, &ins, &g, 1).is_err());
    }

    #[test]
    fn zero_threshold_compare_has_no_deviation() {
        let e = tiny_engine();
        let ins = inputs(&e, 1, 0.3);
        let c = compare(&e, &ins[0], &ThresholdConfig::zeros()).unwrap();
        assert!(c.max_logit_dev <= 1e-9);
        assert_eq!(c.dense.predicted_class, c.delta.predicted_class);
    }

    #[test]
    fn frozen_constant_input_loses_nothing() {
        let cfg = ModelConfig::tiny();
        let mut w = gen_weights::<f64>(3, &cfg);
        w.pos_embed = Matrix::zeros(cfg.seq_len(), cfg.embed_dim);
        let e = Engine::new(cfg, &w).unwrap();
        let c = e.config();
        let mut f = Matrix::zeros(c.seq_tokens, c.feature_dim);
        for r in 0..c.seq_tokens {
            for k in 0..c.feature_dim {
                f.set(r, k, 0.1 * k as f64 - 0.3);
            }
        }
        let cmp = compare(&e, &Input::new("const", f), &ThresholdConfig::uniform(1e9)).unwrap();
        assert!(cmp.max_logit_dev <= 1e-9, "{}", cmp.max_logit_dev);
    }

    #[test]
    fn frozen_random_input_deviates() {
        let e = tiny_engine();
        let ins = inputs(&e, 1, 0.0);
        let cmp = compare(&e, &ins[0], &ThresholdConfig::uniform(1e9)).unwrap();
        assert!(cmp.max_logit_dev > 0.0);
    }

    #[test]
    fn single_precision_engine_runs() {
        let e = tiny_engine().with_precision(Precision::Single);
        let ins = inputs(&e, 1, 0.5);
        let r = run(&e, &ins, Mode::Delta, &ThresholdConfig::zeros()).unwrap();
        let d = run(
            &e.clone().with_precision(Precision::Double),
            &ins,
            Mode::Dense,
            &ThresholdConfig::zeros(),
        )
        .unwrap();
        let dev = deviations(&r[0].logits, &d[0].logits).0;
        assert!(dev < 1e-3, "{dev}");
    }

    #[test]
    fn analysis_dumps_round_trip() {
        let e = tiny_engine();
        let ins = inputs(&e, 1, 0.95);
        let dir = tempfile::tempdir().unwrap();
        let stats = analyze(&e, &ins[0], 1.0, Some(dir.path())).unwrap();
        assert_eq!(stats.len(), e.config().layers);
        assert_eq!(stats[0].softmax.len(), e.config().heads);
        let x0 = crate::io::load_matrix_csv(dir.path().join("layer0_x.csv")).unwrap();
        let (_, traces) = dense_forward_traced(&ins[0].features, e.weights(), e.config()).unwrap();
        assert_eq!(x0, traces[0].mhsa_input);
        assert!(dir.path().join("layer1_softmax_h1_delta.csv").exists());
    }

    #[test]
    fn analysis_of_constant_input_is_fully_redundant() {
        let cfg = ModelConfig::tiny();
        let mut w = gen_weights::<f64>(3, &cfg);
        w.pos_embed = Matrix::zeros(cfg.seq_len(), cfg.embed_dim);
        let e = Engine::new(cfg.clone(), &w).unwrap();
        let f = Matrix::filled(cfg.seq_tokens, cfg.feature_dim, 0.7);
        for l in analyze(&e, &Input::new("c", f), 1.0, None).unwrap() {
            assert_eq!(l.x.below_fraction, 1.0);
            assert!(l.softmax.iter().all(|s| s.below_fraction == 1.0));
        }
    }

    #[test]
    fn correlated_input_analyses_higher() {
        let e = tiny_engine();
        let c = e.config().clone();
        let lo = Input::new("lo", gen_features(5, c.seq_tokens, c.feature_dim, 0.0, 0.0));
        let hi = Input::new(
            "hi",
            gen_features(5, c.seq_tokens, c.feature_dim, 0.95, 0.0),
        );
        let a = analyze(&e, &lo, 1.0, None).unwrap();
        let b = analyze(&e, &hi, 1.0, None).unwrap();
        assert!(b[0].x.below_fraction > a[0].x.below_fraction);
    }
}
