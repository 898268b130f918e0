//! KWT-style encoder: configuration, weights, and the dense and delta
//! forward passes.
//!
//! Both passes share the residual/norm/MLP scaffolding and differ only in
//! how the attention block is evaluated. The delta pass keeps rows 0 (class
//! token) and 1 (first input patch) dense at every site and encodes the
//! remaining rows against a per-site reference that starts at row 1.

use serde::{Deserialize, Serialize};

use crate::accounting::{self, LayerCounts, MacReport, Site, StageId};
use crate::delta::{
    delta_delta_product, delta_matmul_into, delta_softmax_update, encode_row, DeltaRowState,
    DeltaSoftmaxState, SparseDelta,
};
use crate::tensor::{self, add, gelu, layer_norm, matmul, MacCounter, LAYER_NORM_EPSILON};
use crate::{Error, Matrix, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPlacement {
    /// `LN(x + MHSA(x))`, then `LN(h + MLP(h))`.
    #[default]
    Post,
    /// `x + MHSA(LN(x))`, then `h + MLP(LN(h))`.
    Pre,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input patches `T`; the encoder sees `T + 1` tokens.
    pub seq_tokens: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub norm_placement: NormPlacement,
    #[serde(default)]
    pub last_layer_opt: bool,
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    /// d=192, MLP 768, 3 heads, 12 layers, 98 patches of 40 features.
    pub fn kwt3() -> Self {
        Self {
            seq_tokens: 98,
            feature_dim: 40,
            embed_dim: 192,
            mlp_dim: 768,
            heads: 3,
            layers: 12,
            num_classes: 12,
            norm_placement: NormPlacement::Post,
            last_layer_opt: false,
            precision: Precision::Double,
        }
    }

    /// A small model for fast tests.
    pub fn tiny() -> Self {
        Self {
            seq_tokens: 16,
            feature_dim: 8,
            embed_dim: 32,
            mlp_dim: 64,
            heads: 2,
            layers: 3,
            num_classes: 12,
            ..Self::kwt3()
        }
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_tokens + 1
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_tokens", self.seq_tokens),
            ("feature_dim", self.feature_dim),
            ("embed_dim", self.embed_dim),
            ("mlp_dim", self.mlp_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// The six per-site thresholds, in absolute units of the tensors they gate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub theta_x: f64,
    pub theta_q: f64,
    pub theta_k: f64,
    pub theta_att: f64,
    pub theta_softmax: f64,
    pub theta_head: f64,
}

impl ThresholdConfig {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn uniform(theta: f64) -> Self {
        Self::from_array([theta; 6])
    }

    /// 0.2 / 0.2 / 0.2 / 0.05 / 0.001 / 0.05.
    pub fn square_preset() -> Self {
        Self::from_array([0.2, 0.2, 0.2, 0.05, 0.001, 0.05])
    }

    /// Order: x, q, k, att, softmax, head.
    pub fn from_array(t: [f64; 6]) -> Self {
        Self {
            theta_x: t[0],
            theta_q: t[1],
            theta_k: t[2],
            theta_att: t[3],
            theta_softmax: t[4],
            theta_head: t[5],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        [
            self.theta_x,
            self.theta_q,
            self.theta_k,
            self.theta_att,
            self.theta_softmax,
            self.theta_head,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (site, t) in Site::ALL.iter().zip(self.to_array()) {
            if t.is_nan() || t < 0.0 {
                return Err(Error::Config(format!(
                    "theta_{} must be non-negative, got {t}",
                    site.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wp: Matrix<T>,
    pub bq: Option<Matrix<T>>,
    pub bk: Option<Matrix<T>>,
    pub bv: Option<Matrix<T>>,
    pub bp: Option<Matrix<T>>,
    pub ln1_gamma: Matrix<T>,
    pub ln1_beta: Matrix<T>,
    pub ln2_gamma: Matrix<T>,
    pub ln2_beta: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub w0: Matrix<T>,
    pub class_token: Matrix<T>,
    pub pos_embed: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Option<Matrix<T>>,
}

fn expect_shape<T: Real>(name: &str, m: &Matrix<T>, shape: (usize, usize)) -> Result<()> {
    if m.shape() != shape {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: shape,
            found: m.shape(),
        });
    }
    if !m.is_finite() {
        return Err(Error::Header(format!(
            "tensor {name} contains non-finite values"
        )));
    }
    Ok(())
}

impl<T: Real> EncoderWeights<T> {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        let d = config.embed_dim;
        let row = (1, d);
        expect_shape("embed.w0", &self.w0, (config.feature_dim, d))?;
        expect_shape("embed.class", &self.class_token, row)?;
        expect_shape("embed.pos", &self.pos_embed, (config.seq_len(), d))?;
        if self.layers.len() != config.layers {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                config.layers,
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layer.{i}.{s}");
            for (name, w) in [
                ("attn.wq", &l.wq),
                ("attn.wk", &l.wk),
                ("attn.wv", &l.wv),
                ("attn.wp", &l.wp),
            ] {
                expect_shape(&p(name), w, (d, d))?;
            }
            for (name, b) in [
                ("attn.wq.bias", &l.bq),
                ("attn.wk.bias", &l.bk),
                ("attn.wv.bias", &l.bv),
                ("attn.wp.bias", &l.bp),
            ] {
                if let Some(b) = b {
                    expect_shape(&p(name), b, row)?;
                }
            }
            for (name, v) in [
                ("ln1.gamma", &l.ln1_gamma),
                ("ln1.beta", &l.ln1_beta),
                ("ln2.gamma", &l.ln2_gamma),
                ("ln2.beta", &l.ln2_beta),
                ("mlp.b2", &l.b2),
            ] {
                expect_shape(&p(name), v, row)?;
            }
            expect_shape(&p("mlp.w1"), &l.w1, (d, config.mlp_dim))?;
            expect_shape(&p("mlp.b1"), &l.b1, (1, config.mlp_dim))?;
            expect_shape(&p("mlp.w2"), &l.w2, (config.mlp_dim, d))?;
        }
        expect_shape("head.w", &self.head_w, (d, config.num_classes))?;
        if let Some(b) = &self.head_b {
            expect_shape("head.b", b, (1, config.num_classes))?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        let opt = |b: &Option<Matrix<T>>| b.as_ref().map(Matrix::cast);
        EncoderWeights {
            w0: self.w0.cast(),
            class_token: self.class_token.cast(),
            pos_embed: self.pos_embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wp: l.wp.cast(),
                    bq: opt(&l.bq),
                    bk: opt(&l.bk),
                    bv: opt(&l.bv),
                    bp: opt(&l.bp),
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            head_w: self.head_w.cast(),
            head_b: opt(&self.head_b),
        }
    }
}

/// `[class_token; features · W0] + pos_embed`.
pub fn embed_input<T: Real>(
    features: &Matrix<T>,
    weights: &EncoderWeights<T>,
) -> Result<Matrix<T>> {
    if features.cols() != weights.w0.rows() || features.rows() + 1 != weights.pos_embed.rows() {
        return Err(Error::shape(
            "embed_input",
            features.shape(),
            (weights.pos_embed.rows() - 1, weights.w0.rows()),
        ));
    }
    let projected = matmul(features, &weights.w0, &mut MacCounter::new())?;
    let d = weights.w0.cols();
    let mut x = Matrix::zeros(features.rows() + 1, d);
    x.row_mut(0).copy_from_slice(weights.class_token.row(0));
    x.data_mut()[d..].copy_from_slice(projected.data());
    add(&x, &weights.pos_embed)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    pub report: MacReport,
}

/// Intermediate tensors captured from a dense pass for correlation analysis.
#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    /// Input to the attention block (after LN1 for pre-norm).
    pub mhsa_input: Matrix<T>,
    /// Softmax output, one `n × n` matrix per head.
    pub softmax: Vec<Matrix<T>>,
}

fn check_finite<T: Real>(m: &Matrix<T>, layer: usize, stage: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer, stage })
    }
}

fn with_bias<T: Real>(mut m: Matrix<T>, bias: &Option<Matrix<T>>) -> Result<Matrix<T>> {
    if let Some(b) = bias {
        m.add_row_broadcast(b)?;
    }
    Ok(m)
}

fn scale_in_place<T: Real>(m: &mut Matrix<T>, s: T, counter: &mut MacCounter) {
    for x in m.data_mut() {
        *x = *x * s;
    }
    counter.overhead_ops += m.data().len() as u64;
}

fn check_features<T: Real>(features: &Matrix<T>, config: &ModelConfig) -> Result<()> {
    if features.shape() != (config.seq_tokens, config.feature_dim) {
        return Err(Error::shape(
            "features",
            features.shape(),
            (config.seq_tokens, config.feature_dim),
        ));
    }
    Ok(())
}

/// Attention evaluator plugged into the shared layer loop. Receives the
/// attention input, the layer weights and whether only the class row is
/// needed; returns the head-projected output (`n × d`, or `1 × d`).
trait Attention<T> {
    fn forward(
        &mut self,
        layer: usize,
        x: &Matrix<T>,
        w: &LayerWeights<T>,
        class_only: bool,
        counts: &mut LayerCounts,
    ) -> Result<Matrix<T>>;
}

fn mlp<T: Real>(h: &Matrix<T>, w: &LayerWeights<T>, counter: &mut MacCounter) -> Result<Matrix<T>> {
    let mut a = matmul(h, &w.w1, counter)?;
    a.add_row_broadcast(&w.b1)?;
    let mut out = matmul(&gelu(&a), &w.w2, counter)?;
    out.add_row_broadcast(&w.b2)?;
    Ok(out)
}

fn run_encoder<T: Real>(
    features: &Matrix<T>,
    weights: &EncoderWeights<T>,
    config: &ModelConfig,
    attention: &mut impl Attention<T>,
) -> Result<ForwardOutput<T>> {
    weights.validate(config)?;
    check_features(features, config)?;
    let eps = T::from_f64(LAYER_NORM_EPSILON);
    let mut x = embed_input(features, weights)?;
    check_finite(&x, 0, "embed")?;
    let mut layers = Vec::with_capacity(config.layers);

    for (l, w) in weights.layers.iter().enumerate() {
        let class_only = config.last_layer_opt && l + 1 == config.layers;
        let mut counts = LayerCounts::default();
        let attn_in = match config.norm_placement {
            NormPlacement::Post => x.clone(),
            NormPlacement::Pre => layer_norm(&x, &w.ln1_gamma, &w.ln1_beta, eps)?,
        };
        let mhsa = attention.forward(l, &attn_in, w, class_only, &mut counts)?;
        check_finite(&mhsa, l, "attention")?;
        let residual = if class_only { x.slice_rows(0, 1) } else { x };
        let mlp_counter = counts.stage_mut(StageId::Mlp);
        x = match config.norm_placement {
            NormPlacement::Post => {
                let h = layer_norm(&add(&mhsa, &residual)?, &w.ln1_gamma, &w.ln1_beta, eps)?;
                let m = mlp(&h, w, mlp_counter)?;
                layer_norm(&add(&m, &h)?, &w.ln2_gamma, &w.ln2_beta, eps)?
            }
            NormPlacement::Pre => {
                let h = add(&mhsa, &residual)?;
                let m = mlp(
                    &layer_norm(&h, &w.ln2_gamma, &w.ln2_beta, eps)?,
                    w,
                    mlp_counter,
                )?;
                add(&m, &h)?
            }
        };
        check_finite(&x, l, "mlp")?;
        if class_only {
            for stage in StageId::ALL {
                counts.stage_mut(stage).dense_equivalent =
                    accounting::dense_stage_macs(config, stage, false);
            }
        }
        layers.push(counts);
    }

    let class_row = x.slice_rows(0, 1);
    let mut logits = matmul(&class_row, &weights.head_w, &mut MacCounter::new())?;
    if let Some(b) = &weights.head_b {
        logits.add_row_broadcast(b)?;
    }
    check_finite(&logits, config.layers.saturating_sub(1), "classifier")?;
    Ok(ForwardOutput {
        logits: logits.into_data(),
        report: MacReport::from_layers(layers),
    })
}

struct DenseAttention<T> {
    heads: usize,
    trace: Option<Vec<LayerTrace<T>>>,
}

impl<T: Real> Attention<T> for DenseAttention<T> {
    fn forward(
        &mut self,
        _layer: usize,
        x: &Matrix<T>,
        w: &LayerWeights<T>,
        class_only: bool,
        counts: &mut LayerCounts,
    ) -> Result<Matrix<T>> {
        let n = x.rows();
        let d = x.cols();
        let dh = d / self.heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();

        let proj = counts.stage_mut(StageId::ProjQKV);
        let q_in = if class_only {
            x.slice_rows(0, 1)
        } else {
            x.clone()
        };
        let q = with_bias(matmul(&q_in, &w.wq, proj)?, &w.bq)?;
        let k = with_bias(matmul(x, &w.wk, proj)?, &w.bk)?;
        let v = with_bias(matmul(x, &w.wv, proj)?, &w.bv)?;

        let mut concat = Matrix::zeros(q.rows(), d);
        let mut probs = Vec::new();
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let kt = k.slice_cols(lo, hi).transpose();
            let mut scores = matmul(
                &q.slice_cols(lo, hi),
                &kt,
                counts.stage_mut(StageId::AttScores),
            )?;
            scale_in_place(&mut scores, scale, counts.stage_mut(StageId::AttScores));
            let p = tensor::row_softmax(&scores);
            counts.stage_mut(StageId::AttScores).overhead_ops += 2 * p.data().len() as u64;
            let ctx = matmul(
                &p,
                &v.slice_cols(lo, hi),
                counts.stage_mut(StageId::AttContext),
            )?;
            concat.set_cols(lo, &ctx)?;
            if self.trace.is_some() {
                probs.push(p);
            }
        }
        let out = with_bias(
            matmul(&concat, &w.wp, counts.stage_mut(StageId::HeadProj))?,
            &w.bp,
        )?;
        if let Some(trace) = &mut self.trace {
            debug_assert_eq!(n, x.rows());
            trace.push(LayerTrace {
                mhsa_input: x.clone(),
                softmax: probs,
            });
        }
        Ok(out)
    }
}

/// Dense reference forward pass.
pub fn dense_forward<T: Real>(
    features: &Matrix<T>,
    weights: &EncoderWeights<T>,
    config: &ModelConfig,
) -> Result<ForwardOutput<T>> {
    let mut attn = DenseAttention {
        heads: config.heads,
        trace: None,
    };
    run_encoder(features, weights, config, &mut attn)
}

/// Dense forward pass that also returns per-layer attention inputs and
/// softmax outputs.
pub fn dense_forward_traced<T: Real>(
    features: &Matrix<T>,
    weights: &EncoderWeights<T>,
    config: &ModelConfig,
) -> Result<(ForwardOutput<T>, Vec<LayerTrace<T>>)> {
    let mut attn = DenseAttention {
        heads: config.heads,
        trace: Some(Vec::new()),
    };
    let out = run_encoder(features, weights, config, &mut attn)?;
    Ok((out, attn.trace.unwrap_or_default()))
}

/// Rows that are always processed densely at every site.
const ANCHORS: usize = 2;

/// Encode rows `ANCHORS..` of `m` against a reference starting at the last
/// anchor row. Returns the deltas and the reconstructed matrix (anchors
/// verbatim, later rows equal to the reference after each step).
fn encode_rows<T: Real>(
    m: &Matrix<T>,
    theta: T,
    site: &mut crate::accounting::SiteCount,
) -> Result<(Vec<SparseDelta<T>>, Matrix<T>)> {
    let mut recon = m.clone();
    let mut deltas = Vec::new();
    if m.rows() <= ANCHORS {
        return Ok((deltas, recon));
    }
    let mut state = DeltaRowState::new(m.row(ANCHORS - 1).to_vec());
    for t in ANCHORS..m.rows() {
        let d = encode_row(m.row(t), &mut state, theta)?;
        site.retained += d.nnz() as u64;
        site.candidates += m.cols() as u64;
        recon.row_mut(t).copy_from_slice(&state.reference);
        deltas.push(d);
    }
    Ok((deltas, recon))
}

/// `m · w` for a delta-encoded left operand: anchor rows dense, later rows
/// through delta-regular updates of each weight matrix.
fn delta_project<T: Real>(
    m: &Matrix<T>,
    theta: T,
    weights: &[&Matrix<T>],
    site: &mut crate::accounting::SiteCount,
    counter: &mut MacCounter,
) -> Result<Vec<Matrix<T>>> {
    let n = m.rows();
    let anchors = m.slice_rows(0, ANCHORS.min(n));
    let mut outs = Vec::with_capacity(weights.len());
    for w in weights {
        let mut out = Matrix::zeros(n, w.cols());
        let head = matmul(&anchors, w, counter)?;
        out.data_mut()[..head.data().len()].copy_from_slice(head.data());
        outs.push(out);
    }
    if n <= ANCHORS {
        return Ok(outs);
    }
    let mut state = DeltaRowState::new(m.row(ANCHORS - 1).to_vec());
    let mut accs: Vec<Vec<T>> = outs.iter().map(|o| o.row(ANCHORS - 1).to_vec()).collect();
    for t in ANCHORS..n {
        let d = encode_row(m.row(t), &mut state, theta)?;
        site.retained += d.nnz() as u64;
        site.candidates += m.cols() as u64;
        for ((w, acc), out) in weights.iter().zip(accs.iter_mut()).zip(outs.iter_mut()) {
            delta_matmul_into(&d, w, acc, counter)?;
            out.row_mut(t).copy_from_slice(acc);
        }
    }
    Ok(outs)
}

struct DeltaAttention<T> {
    heads: usize,
    thresholds: [T; 6],
}

impl<T: Real> DeltaAttention<T> {
    fn theta(&self, site: Site) -> T {
        self.thresholds[site.index()]
    }

    /// Softmax over score rows: anchors dense, later rows through the
    /// incremental update on `theta_att`-encoded logits.
    fn delta_softmax(&self, scores: &Matrix<T>, counts: &mut LayerCounts) -> Result<Matrix<T>> {
        let n = scores.rows();
        let mut p = Matrix::zeros(n, scores.cols());
        let counter = counts.stage_mut(StageId::AttScores);
        for r in 0..ANCHORS.min(n) {
            let s = DeltaSoftmaxState::from_logits(scores.row(r), counter)?;
            p.row_mut(r).copy_from_slice(&s.prev_softmax);
        }
        if n <= ANCHORS {
            return Ok(p);
        }
        let mut enc = DeltaRowState::new(scores.row(ANCHORS - 1).to_vec());
        let mut state = DeltaSoftmaxState::from_logits(&enc.reference, &mut MacCounter::new())?;
        for t in ANCHORS..n {
            let d = encode_row(scores.row(t), &mut enc, self.theta(Site::Att))?;
            let site = counts.site_mut(Site::Att);
            site.retained += d.nnz() as u64;
            site.candidates += scores.cols() as u64;
            let counter = counts.stage_mut(StageId::AttScores);
            match delta_softmax_update(&mut state, &d, counter) {
                Ok(row) => p.row_mut(t).copy_from_slice(&row),
                Err(Error::NumericRange(_)) => {
                    counts.softmax_fallbacks += 1;
                    state = DeltaSoftmaxState::from_logits(
                        &enc.reference,
                        counts.stage_mut(StageId::AttScores),
                    )?;
                    p.row_mut(t).copy_from_slice(&state.prev_softmax);
                }
                Err(e) => return Err(e),
            }
        }
        Ok(p)
    }
}

impl<T: Real> Attention<T> for DeltaAttention<T> {
    fn forward(
        &mut self,
        _layer: usize,
        x: &Matrix<T>,
        w: &LayerWeights<T>,
        class_only: bool,
        counts: &mut LayerCounts,
    ) -> Result<Matrix<T>> {
        let d = x.cols();
        let dh = d / self.heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();

        // site X: one reference row feeds every projection
        let (q, k, v) = {
            let mut site = counts.sites[Site::X.index()];
            let proj = counts.stage_mut(StageId::ProjQKV);
            let (q, kv) = if class_only {
                let q = matmul(&x.slice_rows(0, 1), &w.wq, proj)?;
                (
                    q,
                    delta_project(x, self.theta(Site::X), &[&w.wk, &w.wv], &mut site, proj)?,
                )
            } else {
                let mut all = delta_project(
                    x,
                    self.theta(Site::X),
                    &[&w.wq, &w.wk, &w.wv],
                    &mut site,
                    proj,
                )?;
                let q = all.remove(0);
                (q, all)
            };
            counts.sites[Site::X.index()] = site;
            let mut kv = kv.into_iter();
            let k = kv.next().expect("key projection");
            let v = kv.next().expect("value projection");
            (
                with_bias(q, &w.bq)?,
                with_bias(k, &w.bk)?,
                with_bias(v, &w.bv)?,
            )
        };

        let rows_out = q.rows();
        let mut concat = Matrix::zeros(rows_out, d);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = q.slice_cols(lo, hi);
            let kh = k.slice_cols(lo, hi);
            let vh = v.slice_cols(lo, hi);

            // sites Q and K, then the delta-delta scores
            let (k_deltas, _) = encode_rows(&kh, self.theta(Site::K), counts.site_mut(Site::K))?;
            let k_anchors: Vec<&[T]> = (0..ANCHORS.min(kh.rows())).map(|r| kh.row(r)).collect();
            let k_deltas = if k_anchors.len() < ANCHORS {
                Vec::new()
            } else {
                k_deltas
            };
            let mut scores = if class_only {
                delta_delta_product(
                    &[qh.row(0)],
                    &[],
                    &k_anchors,
                    &k_deltas,
                    counts.stage_mut(StageId::AttScores),
                )?
            } else {
                let (q_deltas, _) =
                    encode_rows(&qh, self.theta(Site::Q), counts.site_mut(Site::Q))?;
                let q_anchors: Vec<&[T]> = (0..ANCHORS.min(qh.rows())).map(|r| qh.row(r)).collect();
                delta_delta_product(
                    &q_anchors,
                    &q_deltas,
                    &k_anchors,
                    &k_deltas,
                    counts.stage_mut(StageId::AttScores),
                )?
            };
            scale_in_place(&mut scores, scale, counts.stage_mut(StageId::AttScores));

            // sites att and softmax
            let ctx = if class_only {
                let p = tensor::row_softmax(&scores);
                counts.stage_mut(StageId::AttScores).overhead_ops += 2 * p.data().len() as u64;
                matmul(&p, &vh, counts.stage_mut(StageId::AttContext))?
            } else {
                let p = self.delta_softmax(&scores, counts)?;
                let mut site = counts.sites[Site::Softmax.index()];
                let mut ctx = delta_project(
                    &p,
                    self.theta(Site::Softmax),
                    &[&vh],
                    &mut site,
                    counts.stage_mut(StageId::AttContext),
                )?;
                counts.sites[Site::Softmax.index()] = site;
                ctx.remove(0)
            };
            concat.set_cols(lo, &ctx)?;
        }

        // site head
        let out = if class_only {
            matmul(&concat, &w.wp, counts.stage_mut(StageId::HeadProj))?
        } else {
            let mut site = counts.sites[Site::Head.index()];
            let mut out = delta_project(
                &concat,
                self.theta(Site::Head),
                &[&w.wp],
                &mut site,
                counts.stage_mut(StageId::HeadProj),
            )?;
            counts.sites[Site::Head.index()] = site;
            out.remove(0)
        };
        with_bias(out, &w.bp)
    }
}

/// Delta forward pass with the six per-site thresholds.
pub fn delta_forward<T: Real>(
    features: &Matrix<T>,
    weights: &EncoderWeights<T>,
    config: &ModelConfig,
    thresholds: &ThresholdConfig,
) -> Result<ForwardOutput<T>> {
    thresholds.validate()?;
    let mut attn = DeltaAttention {
        heads: config.heads,
        thresholds: thresholds.to_array().map(T::from_f64),
    };
    run_encoder(features, weights, config, &mut attn)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn classify<T: Real>(logits: &[T]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericRange("classify"));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}
