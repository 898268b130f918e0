//! Closed-form MAC counts, extreme-case savings bounds and report assembly.
//!
//! All attention figures are per layer. With `n = T + 1` tokens, embedding
//! width `d`, `k` heads and head width `d_h = d / k`, the dense counts are
//!
//! | stage        | dense MACs per layer |
//! |--------------|----------------------|
//! | `ProjQKV`    | `3 · n · d · d`      |
//! | `AttScores`  | `k · n · d_h · n`    |
//! | `AttContext` | `k · n · n · d_h`    |
//! | `HeadProj`   | `n · d · d`          |
//! | `Mlp`        | `n · 2 · d · d_mlp`  |
//!
//! The extreme case keeps only the class-token row and the first input row
//! dense; every later delta is empty.

use serde::{Deserialize, Serialize};

use crate::tensor::MacCounter;
use crate::{Error, ModelConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageId {
    ProjQKV,
    AttScores,
    AttContext,
    HeadProj,
    Mlp,
}

impl StageId {
    pub const ALL: [StageId; 5] = [
        StageId::ProjQKV,
        StageId::AttScores,
        StageId::AttContext,
        StageId::HeadProj,
        StageId::Mlp,
    ];

    /// The four attention stages; the MLP is reported but never pruned.
    pub const MHSA: [StageId; 4] = [
        StageId::ProjQKV,
        StageId::AttScores,
        StageId::AttContext,
        StageId::HeadProj,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            StageId::ProjQKV => "proj_qkv",
            StageId::AttScores => "att_scores",
            StageId::AttContext => "att_context",
            StageId::HeadProj => "head_proj",
            StageId::Mlp => "mlp",
        }
    }
}

/// The six delta-encoding sites of the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    X,
    Q,
    K,
    Att,
    Softmax,
    Head,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::X,
        Site::Q,
        Site::K,
        Site::Att,
        Site::Softmax,
        Site::Head,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::X => "x",
            Site::Q => "q",
            Site::K => "k",
            Site::Att => "att",
            Site::Softmax => "softmax",
            Site::Head => "head",
        }
    }
}

/// Retained deltas versus encoded elements at one site.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteCount {
    pub retained: u64,
    pub candidates: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub stages: [MacCounter; 5],
    pub sites: [SiteCount; 6],
    pub softmax_fallbacks: u64,
}

impl LayerCounts {
    pub fn stage(&self, stage: StageId) -> &MacCounter {
        &self.stages[stage.index()]
    }

    pub fn stage_mut(&mut self, stage: StageId) -> &mut MacCounter {
        &mut self.stages[stage.index()]
    }

    pub fn site_mut(&mut self, site: Site) -> &mut SiteCount {
        &mut self.sites[site.index()]
    }
}

fn ratio(executed: u64, dense: u64) -> f64 {
    if dense == 0 {
        1.0
    } else {
        executed as f64 / dense as f64
    }
}

/// Per-layer, per-stage executed and dense-equivalent MAC counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacReport {
    layers: Vec<LayerCounts>,
}

impl MacReport {
    pub fn from_layers(layers: Vec<LayerCounts>) -> Self {
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerCounts] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerCounts] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn stage_total(&self, stage: StageId) -> MacCounter {
        self.layers
            .iter()
            .fold(MacCounter::new(), |acc, l| acc + *l.stage(stage))
    }

    pub fn mhsa_total(&self) -> MacCounter {
        StageId::MHSA
            .iter()
            .fold(MacCounter::new(), |acc, &s| acc + self.stage_total(s))
    }

    /// Executed fraction of one stage, averaged over layers (unweighted).
    pub fn stage_fraction(&self, stage: StageId) -> f64 {
        if self.layers.is_empty() {
            return 1.0;
        }
        let sum: f64 = self
            .layers
            .iter()
            .map(|l| ratio(l.stage(stage).executed, l.stage(stage).dense_equivalent))
            .sum();
        sum / self.layers.len() as f64
    }

    /// Attention executed MACs over attention dense MACs, all layers pooled.
    pub fn total_fraction(&self) -> f64 {
        let t = self.mhsa_total();
        ratio(t.executed, t.dense_equivalent)
    }

    /// Unweighted mean of the four attention stage fractions.
    pub fn total_fraction_stage_mean(&self) -> f64 {
        StageId::MHSA
            .iter()
            .map(|&s| self.stage_fraction(s))
            .sum::<f64>()
            / 4.0
    }

    /// MAC-derived attention speedup, `dense / executed`.
    pub fn speedup(&self) -> f64 {
        let t = self.mhsa_total();
        if t.executed == 0 {
            return if t.dense_equivalent == 0 {
                1.0
            } else {
                f64::INFINITY
            };
        }
        t.dense_equivalent as f64 / t.executed as f64
    }

    pub fn site_total(&self, site: Site) -> SiteCount {
        self.layers
            .iter()
            .fold(SiteCount::default(), |acc, l| SiteCount {
                retained: acc.retained + l.sites[site.index()].retained,
                candidates: acc.candidates + l.sites[site.index()].candidates,
            })
    }

    pub fn softmax_fallbacks(&self) -> u64 {
        self.layers.iter().map(|l| l.softmax_fallbacks).sum()
    }
}

/// Aggregate `(layer, stage, counter)` entries into a report. Entries for the
/// same cell are merged; every stage of every layer up to the highest layer
/// index must be present.
pub fn assemble_report(
    entries: impl IntoIterator<Item = (usize, StageId, MacCounter)>,
) -> Result<MacReport> {
    let mut layers: Vec<LayerCounts> = Vec::new();
    let mut seen: Vec<[bool; 5]> = Vec::new();
    for (layer, stage, counter) in entries {
        if layer >= layers.len() {
            layers.resize_with(layer + 1, LayerCounts::default);
            seen.resize(layer + 1, [false; 5]);
        }
        layers[layer].stages[stage.index()] += counter;
        seen[layer][stage.index()] = true;
    }
    if layers.is_empty() {
        return Err(Error::Empty("report entries"));
    }
    for (layer, flags) in seen.iter().enumerate() {
        if let Some(i) = flags.iter().position(|&f| !f) {
            return Err(Error::MissingEntry {
                layer,
                stage: StageId::ALL[i].name(),
            });
        }
    }
    Ok(MacReport { layers })
}

/// Dense MACs of one stage in one layer. With `class_row_only`, queries,
/// scores, context and head projection are restricted to the class-token
/// row (and so is the MLP, whose other rows no longer reach the output).
pub fn dense_stage_macs(config: &ModelConfig, stage: StageId, class_row_only: bool) -> u64 {
    let n = config.seq_len() as u64;
    let d = config.embed_dim as u64;
    let k = config.heads as u64;
    let dh = config.head_dim() as u64;
    let q_rows = if class_row_only { 1 } else { n };
    match stage {
        StageId::ProjQKV => (q_rows + 2 * n) * d * d,
        StageId::AttScores => k * q_rows * dh * n,
        StageId::AttContext => k * q_rows * n * dh,
        StageId::HeadProj => q_rows * d * d,
        StageId::Mlp => q_rows * 2 * d * config.mlp_dim as u64,
    }
}

/// Executed MACs of one stage when every delta is empty: only the class
/// token and the first input row are computed.
pub fn min_stage_macs(config: &ModelConfig, stage: StageId, last_layer: bool) -> Result<u64> {
    let n = config.seq_len() as u64;
    let d = config.embed_dim as u64;
    let k = config.heads as u64;
    let dh = config.head_dim() as u64;
    let anchors = 2.min(n);
    Ok(match (stage, last_layer) {
        (StageId::ProjQKV, false) => anchors * d * d * 3,
        (StageId::ProjQKV, true) => anchors * d * d * 2 + d * d,
        (StageId::AttScores, false) => dh * anchors * anchors * k,
        (StageId::AttScores, true) => dh * anchors * k,
        (StageId::AttContext, false) => n * anchors * dh * k,
        (StageId::AttContext, true) => n * dh * k,
        (StageId::HeadProj, false) => d * anchors * d,
        (StageId::HeadProj, true) => d * d,
        (StageId::Mlp, _) => return Err(Error::UnsupportedStage(StageId::Mlp.name())),
    })
}

/// Largest achievable saving of a stage relative to its full dense count.
pub fn theoretical_max_savings(
    config: &ModelConfig,
    stage: StageId,
    last_layer: bool,
) -> Result<f64> {
    let min = min_stage_macs(config, stage, last_layer)?;
    let dense = dense_stage_macs(config, stage, false);
    Ok(1.0 - min as f64 / dense as f64)
}

/// Fraction of one layer's attention MACs removed by computing only the
/// class-token row.
pub fn last_layer_savings(config: &ModelConfig) -> f64 {
    let full: u64 = StageId::MHSA
        .iter()
        .map(|&s| dense_stage_macs(config, s, false))
        .sum();
    let reduced: u64 = StageId::MHSA
        .iter()
        .map(|&s| dense_stage_macs(config, s, true))
        .sum();
    1.0 - reduced as f64 / full as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pct(x: f64) -> f64 {
        (x * 10_000.0).round() / 100.0
    }

    #[test]
    fn kwt3_dense_counts() {
        let c = ModelConfig::kwt3();
        assert_eq!(
            dense_stage_macs(&c, StageId::ProjQKV, false),
            3 * 99 * 192 * 192
        );
        assert_eq!(dense_stage_macs(&c, StageId::ProjQKV, false), 10_948_608);
        assert_eq!(dense_stage_macs(&c, StageId::AttScores, false), 1_881_792);
        assert_eq!(dense_stage_macs(&c, StageId::AttContext, false), 1_881_792);
        assert_eq!(dense_stage_macs(&c, StageId::HeadProj, false), 3_649_536);
        assert_eq!(dense_stage_macs(&c, StageId::Mlp, false), 29_196_288);
    }

    #[test]
    fn kwt3_stage_split() {
        let c = ModelConfig::kwt3();
        let counts: Vec<u64> = StageId::MHSA
            .iter()
            .map(|&s| dense_stage_macs(&c, s, false))
            .collect();
        let total: u64 = counts.iter().sum();
        let split: Vec<f64> = counts
            .iter()
            .map(|&x| pct(x as f64 / total as f64))
            .collect();
        assert_eq!(split, vec![59.63, 10.25, 10.25, 19.88]);
        let mlp = dense_stage_macs(&c, StageId::Mlp, false);
        let mhsa_share = total as f64 / (total + mlp) as f64;
        assert!((mhsa_share - 0.39).abs() < 0.005, "{mhsa_share}");
    }

    #[test]
    fn kwt3_savings_bounds() {
        let c = ModelConfig::kwt3();
        let cases = [
            (StageId::ProjQKV, 97.98, 98.32),
            (StageId::AttScores, 99.96, 99.98),
            (StageId::AttContext, 97.98, 98.99),
            (StageId::HeadProj, 97.98, 98.99),
        ];
        for (stage, early, last) in cases {
            assert_eq!(
                pct(theoretical_max_savings(&c, stage, false).unwrap()),
                early,
                "{stage:?}"
            );
            assert_eq!(
                pct(theoretical_max_savings(&c, stage, true).unwrap()),
                last,
                "{stage:?}"
            );
        }
        assert!(matches!(
            theoretical_max_savings(&c, StageId::Mlp, false),
            Err(Error::UnsupportedStage(_))
        ));
        assert_eq!(
            min_stage_macs(&c, StageId::AttScores, false).unwrap(),
            256 * 3
        );
    }

    #[test]
    fn kwt3_last_layer_savings() {
        let c = ModelConfig::kwt3();
        let s = last_layer_savings(&c);
        assert_eq!(pct(s), 59.64);
        assert!(pct(s / c.layers as f64) >= 4.97);
    }

    fn uniform_report(layers: usize, executed: u64, dense: u64) -> MacReport {
        let entries = (0..layers).flat_map(|l| {
            StageId::ALL.map(move |s| {
                (
                    l,
                    s,
                    MacCounter {
                        executed,
                        dense_equivalent: dense,
                        overhead_ops: 0,
                    },
                )
            })
        });
        assemble_report(entries).unwrap()
    }

    #[test]
    fn report_fraction_edges() {
        let r = uniform_report(3, 100, 100);
        assert_eq!(r.total_fraction(), 1.0);
        assert_eq!(r.speedup(), 1.0);
        let r = uniform_report(3, 50, 100);
        assert_eq!(r.speedup(), 2.0);
        assert_eq!(r.stage_fraction(StageId::HeadProj), 0.5);
    }

    #[test]
    fn report_missing_entries() {
        let err = assemble_report([(0, StageId::ProjQKV, MacCounter::new())]).unwrap_err();
        assert!(matches!(err, Error::MissingEntry { layer: 0, .. }));
        let mut entries: Vec<_> = StageId::ALL
            .iter()
            .map(|&s| (1, s, MacCounter::new()))
            .collect();
        entries.pop();
        assert!(assemble_report(entries).is_err());
        assert!(assemble_report(Vec::new()).is_err());
    }

    #[test]
    fn report_matches_spreadsheet_recount() {
        // layer × stage executed/dense, hand-tabulated
        let table = [
            [(10u64, 20u64), (1, 4), (3, 4), (5, 10), (7, 7)],
            [(20, 20), (0, 4), (1, 4), (10, 10), (7, 7)],
        ];
        let entries = table.iter().enumerate().flat_map(|(l, row)| {
            row.iter().enumerate().map(move |(s, &(e, d))| {
                (
                    l,
                    StageId::ALL[s],
                    MacCounter {
                        executed: e,
                        dense_equivalent: d,
                        overhead_ops: 1,
                    },
                )
            })
        });
        let r = assemble_report(entries).unwrap();
        assert_eq!(r.stage_fraction(StageId::ProjQKV), (0.5 + 1.0) / 2.0);
        assert_eq!(r.stage_fraction(StageId::AttScores), (0.25 + 0.0) / 2.0);
        // attention pool: executed 10+1+3+5+20+0+1+10 = 50, dense 20+4+4+10+20+4+4+10 = 76
        assert_eq!(r.total_fraction(), 50.0 / 76.0);
        assert_eq!(r.speedup(), 76.0 / 50.0);
        assert_eq!(r.stage_total(StageId::Mlp).overhead_ops, 2);
    }

    proptest! {
        #[test]
        fn assembly_is_order_invariant(
            counts in proptest::collection::vec((0u64..1000, 1000u64..2000, 0u64..10), 15),
            seed in any::<u64>(),
        ) {
            let entries: Vec<_> = counts.iter().enumerate().map(|(i, &(e, d, o))| {
                (i / 5, StageId::ALL[i % 5], MacCounter { executed: e, dense_equivalent: d, overhead_ops: o })
            }).collect();
            let mut shuffled = entries.clone();
            // deterministic Fisher-Yates from the seed
            let mut state = seed;
            for i in (1..shuffled.len()).rev() {
                let r = crate::io::splitmix64(&mut state);
                shuffled.swap(i, (r % (i as u64 + 1)) as usize);
            }
            let a = assemble_report(entries).unwrap();
            let b = assemble_report(shuffled).unwrap();
            prop_assert_eq!(&a, &b);
            let sum: u64 = counts.iter().map(|c| c.0).sum();
            let total: u64 = StageId::ALL.iter().map(|&s| a.stage_total(s).executed).sum();
            prop_assert_eq!(sum, total);
            prop_assert!(a.total_fraction() <= 1.0 && a.speedup() >= 1.0);
        }
    }
}
