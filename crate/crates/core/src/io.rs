//! File formats, seeded fixture generators and report emission.
//!
//! # Weight container (`.dkwt`)
//!
//! ```text
//! "DKWT" | version: u32 LE (=1) | header_len: u64 LE | header (UTF-8 JSON) | payload
//! ```
//!
//! The header is `{"dtype":"f32le","config":{..},"tensors":[{"name","shape","offset"}]}`
//! with byte offsets relative to the payload start. The payload is binary32
//! little-endian, row-major. Tensors are written contiguously in canonical
//! order and the loader requires exactly that tiling.
//!
//! # Feature file (`.dkwf`)
//!
//! ```text
//! "DKWF" | version: u32 LE (=1) | rows: u32 LE | cols: u32 LE | rows·cols binary32 LE
//! ```
//!
//! A CSV alternative (any path ending in `.csv`) has a first line
//! `<rows>,<cols>` followed by one line per row. Matrix dumps use the same
//! layout, so they load back through [`load_matrix_csv`].

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accounting::{MacReport, Site, StageId};
use crate::model::{EncoderWeights, LayerWeights};
use crate::{Error, Matrix, ModelConfig, Real, Result, ThresholdConfig};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"DKWT";
pub const FEATURES_MAGIC: [u8; 4] = *b"DKWF";
pub const FORMAT_VERSION: u32 = 1;

/// Standard deviation of generated weight tensors.
pub const WEIGHT_STD: f64 = 0.05;

/// One step of the splitmix64 generator.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Gaussian stream: splitmix64 uniforms through Box–Muller, both outputs
/// of each pair used in order (cosine first).
#[derive(Debug, Clone)]
pub struct GaussianStream {
    state: u64,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            spare: None,
        }
    }

    /// Stream for a named tensor: state `seed ^ fnv1a64(name)`.
    pub fn for_tensor(seed: u64, name: &str) -> Self {
        Self::new(seed ^ fnv1a64(name.as_bytes()))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (splitmix64(&mut self.state) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Gaussian matrix from the named stream, in full double precision.
pub fn gen_gaussian_matrix<T: Real>(
    seed: u64,
    name: &str,
    rows: usize,
    cols: usize,
    std: f64,
) -> Matrix<T> {
    let mut g = GaussianStream::for_tensor(seed, name);
    let data = (0..rows * cols)
        .map(|_| T::from_f64(g.gaussian() * std))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

/// Values rounded through binary32 so generated fixtures equal what the
/// containers store.
fn gen_stored<T: Real>(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let mut g = GaussianStream::for_tensor(seed, name);
    let data = (0..rows * cols)
        .map(|_| T::from_f64((g.gaussian() * std) as f32 as f64))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

/// Deterministic synthetic weights: N(0, 0.05²) matrices, zero biases and
/// betas, unit gammas. Projection biases are omitted.
pub fn gen_weights<T: Real>(seed: u64, config: &ModelConfig) -> EncoderWeights<T> {
    let d = config.embed_dim;
    let g = |name: &str, r: usize, c: usize| gen_stored::<T>(seed, name, r, c, WEIGHT_STD);
    EncoderWeights {
        w0: g("embed.w0", config.feature_dim, d),
        class_token: g("embed.class", 1, d),
        pos_embed: g("embed.pos", config.seq_len(), d),
        layers: (0..config.layers)
            .map(|i| LayerWeights {
                wq: g(&format!("layer.{i}.attn.wq"), d, d),
                wk: g(&format!("layer.{i}.attn.wk"), d, d),
                wv: g(&format!("layer.{i}.attn.wv"), d, d),
                wp: g(&format!("layer.{i}.attn.wp"), d, d),
                bq: None,
                bk: None,
                bv: None,
                bp: None,
                ln1_gamma: Matrix::filled(1, d, T::one()),
                ln1_beta: Matrix::zeros(1, d),
                ln2_gamma: Matrix::filled(1, d, T::one()),
                ln2_beta: Matrix::zeros(1, d),
                w1: g(&format!("layer.{i}.mlp.w1"), d, config.mlp_dim),
                b1: Matrix::zeros(1, config.mlp_dim),
                w2: g(&format!("layer.{i}.mlp.w2"), config.mlp_dim, d),
                b2: Matrix::zeros(1, d),
            })
            .collect(),
        head_w: g("head.w", d, config.num_classes),
        head_b: None,
    }
}

/// Synthetic feature sequence. Row 0 is N(0, 1); each later row is
/// `rho · prev + sqrt(1 - rho²) · noise`, except that with probability
/// `jump_prob` it is resampled outright. Per row the stream yields one
/// uniform for the jump decision, then `cols` Gaussians.
pub fn gen_features<T: Real>(
    seed: u64,
    rows: usize,
    cols: usize,
    rho: f64,
    jump_prob: f64,
) -> Matrix<T> {
    let rho = rho.clamp(0.0, 1.0);
    let mut g = GaussianStream::for_tensor(seed, "features");
    let mix = (1.0 - rho * rho).sqrt();
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        let jump = r == 0 || g.uniform() < jump_prob;
        for c in 0..cols {
            let noise = g.gaussian();
            out[r * cols + c] = if jump {
                noise
            } else {
                rho * out[(r - 1) * cols + c] + mix * noise
            };
        }
    }
    let data = out
        .into_iter()
        .map(|v| T::from_f64(v as f32 as f64))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("length matches")
}

/// Canonical `(name, tensor)` listing of a weight set.
pub fn named_tensors<T: Real>(w: &EncoderWeights<T>) -> Vec<(String, &Matrix<T>)> {
    let mut out: Vec<(String, &Matrix<T>)> = vec![
        ("embed.w0".into(), &w.w0),
        ("embed.class".into(), &w.class_token),
        ("embed.pos".into(), &w.pos_embed),
    ];
    for (i, l) in w.layers.iter().enumerate() {
        for (name, m, b) in [
            ("wq", &l.wq, &l.bq),
            ("wk", &l.wk, &l.bk),
            ("wv", &l.wv, &l.bv),
            ("wp", &l.wp, &l.bp),
        ] {
            out.push((format!("layer.{i}.attn.{name}"), m));
            if let Some(b) = b {
                out.push((format!("layer.{i}.attn.{name}.bias"), b));
            }
        }
        out.push((format!("layer.{i}.ln1.gamma"), &l.ln1_gamma));
        out.push((format!("layer.{i}.ln1.beta"), &l.ln1_beta));
        out.push((format!("layer.{i}.ln2.gamma"), &l.ln2_gamma));
        out.push((format!("layer.{i}.ln2.beta"), &l.ln2_beta));
        out.push((format!("layer.{i}.mlp.w1"), &l.w1));
        out.push((format!("layer.{i}.mlp.b1"), &l.b1));
        out.push((format!("layer.{i}.mlp.w2"), &l.w2));
        out.push((format!("layer.{i}.mlp.b2"), &l.b2));
    }
    out.push(("head.w".into(), &w.head_w));
    if let Some(b) = &w.head_b {
        out.push(("head.b".into(), b));
    }
    out
}

/// Expected shape of a vocabulary name, `None` if the name is not part of
/// the vocabulary for this configuration.
fn vocabulary_shape(name: &str, c: &ModelConfig) -> Option<(usize, usize)> {
    let d = c.embed_dim;
    match name {
        "embed.w0" => return Some((c.feature_dim, d)),
        "embed.class" => return Some((1, d)),
        "embed.pos" => return Some((c.seq_len(), d)),
        "head.w" => return Some((d, c.num_classes)),
        "head.b" => return Some((1, c.num_classes)),
        _ => {}
    }
    let rest = name.strip_prefix("layer.")?;
    let (idx, tail) = rest.split_once('.')?;
    if idx.is_empty()
        || (idx.len() > 1 && idx.starts_with('0'))
        || !idx.bytes().all(|b| b.is_ascii_digit())
    {
        return None;
    }
    if idx.parse::<usize>().ok()? >= c.layers {
        return None;
    }
    match tail {
        "attn.wq" | "attn.wk" | "attn.wv" | "attn.wp" => Some((d, d)),
        "attn.wq.bias" | "attn.wk.bias" | "attn.wv.bias" | "attn.wp.bias" => Some((1, d)),
        "ln1.gamma" | "ln1.beta" | "ln2.gamma" | "ln2.beta" | "mlp.b2" => Some((1, d)),
        "mlp.w1" => Some((d, c.mlp_dim)),
        "mlp.b1" => Some((1, c.mlp_dim)),
        "mlp.w2" => Some((c.mlp_dim, d)),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerHeader {
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

/// Configuration plus binary32 weights, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightContainer {
    pub config: ModelConfig,
    pub weights: EncoderWeights<f32>,
}

impl WeightContainer {
    pub fn new<T: Real>(config: ModelConfig, weights: &EncoderWeights<T>) -> Result<Self> {
        weights.validate(&config)?;
        Ok(Self {
            config,
            weights: weights.cast(),
        })
    }
}

pub fn encode_weights(container: &WeightContainer) -> Result<Vec<u8>> {
    container.weights.validate(&container.config)?;
    let tensors = named_tensors(&container.weights);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, m) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset,
        });
        offset += 4 * m.data().len() as u64;
    }
    let header = ContainerHeader {
        dtype: "f32le".into(),
        config: container.config.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, m) in &tensors {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_magic(bytes: &[u8], expected: [u8; 4]) -> Result<()> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            needed: 4,
            found: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_weights(bytes: &[u8]) -> Result<WeightContainer> {
    read_magic(bytes, WEIGHTS_MAGIC)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            needed: 16,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = 16u64.saturating_add(header_len);
    if header_end > bytes.len() as u64 {
        return Err(Error::Truncated {
            needed: header_end,
            found: bytes.len() as u64,
        });
    }
    let header_end = header_end as usize;
    let text =
        std::str::from_utf8(&bytes[16..header_end]).map_err(|e| Error::Header(e.to_string()))?;
    let header: ContainerHeader =
        serde_json::from_str(text).map_err(|e| Error::Header(e.to_string()))?;
    if header.dtype != "f32le" {
        return Err(Error::Header(format!(
            "unsupported dtype {:?}",
            header.dtype
        )));
    }
    let config = header.config;
    config
        .validate()
        .map_err(|e| Error::Header(e.to_string()))?;
    let payload = &bytes[header_end..];
    let payload_len = payload.len() as u64;

    let mut names = HashSet::new();
    let mut needed = 0u64;
    for t in &header.tensors {
        if !names.insert(t.name.as_str()) {
            return Err(Error::Header(format!("duplicate tensor {}", t.name)));
        }
        let expected = vocabulary_shape(&t.name, &config)
            .ok_or_else(|| Error::Header(format!("unknown tensor {}", t.name)))?;
        if (t.shape[0], t.shape[1]) != expected {
            return Err(Error::TensorShape {
                name: t.name.clone(),
                expected,
                found: (t.shape[0], t.shape[1]),
            });
        }
        needed += 4 * (expected.0 * expected.1) as u64;
    }
    if payload_len < needed {
        return Err(Error::Truncated {
            needed: header_end as u64 + needed,
            found: bytes.len() as u64,
        });
    }

    let mut tensors = std::collections::HashMap::new();
    let mut cursor = 0u64;
    for t in &header.tensors {
        let len = 4 * (t.shape[0] * t.shape[1]) as u64;
        let end = t.offset.saturating_add(len);
        if end > payload_len {
            return Err(Error::Bounds {
                name: t.name.clone(),
                start: t.offset,
                end,
                len: payload_len,
            });
        }
        if t.offset != cursor {
            return Err(Error::Header(format!(
                "tensor {} at offset {} but expected {}",
                t.name, t.offset, cursor
            )));
        }
        cursor = end;
        let raw = &payload[t.offset as usize..end as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Header(format!(
                "tensor {} contains non-finite values",
                t.name
            )));
        }
        tensors.insert(
            t.name.clone(),
            Matrix::from_vec(t.shape[0], t.shape[1], data)?,
        );
    }
    if cursor != payload_len {
        return Err(Error::Header(format!(
            "{} trailing payload bytes",
            payload_len - cursor
        )));
    }

    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::Header(format!("missing tensor {name}")))
    };
    let w0 = take("embed.w0".into())?;
    let class_token = take("embed.class".into())?;
    let pos_embed = take("embed.pos".into())?;
    let mut layers = Vec::with_capacity(config.layers);
    for i in 0..config.layers {
        let p = |s: &str| format!("layer.{i}.{s}");
        layers.push(LayerWeights {
            wq: take(p("attn.wq"))?,
            wk: take(p("attn.wk"))?,
            wv: take(p("attn.wv"))?,
            wp: take(p("attn.wp"))?,
            bq: take(p("attn.wq.bias")).ok(),
            bk: take(p("attn.wk.bias")).ok(),
            bv: take(p("attn.wv.bias")).ok(),
            bp: take(p("attn.wp.bias")).ok(),
            ln1_gamma: take(p("ln1.gamma"))?,
            ln1_beta: take(p("ln1.beta"))?,
            ln2_gamma: take(p("ln2.gamma"))?,
            ln2_beta: take(p("ln2.beta"))?,
            w1: take(p("mlp.w1"))?,
            b1: take(p("mlp.b1"))?,
            w2: take(p("mlp.w2"))?,
            b2: take(p("mlp.b2"))?,
        });
    }
    let head_w = take("head.w".into())?;
    let head_b = take("head.b".into()).ok();
    let weights = EncoderWeights {
        w0,
        class_token,
        pos_embed,
        layers,
        head_w,
        head_b,
    };
    weights.validate(&config)?;
    Ok(WeightContainer { config, weights })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

pub fn save_weights(path: impl AsRef<Path>, container: &WeightContainer) -> Result<()> {
    let bytes = encode_weights(container)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightContainer> {
    decode_weights(&read_file(path.as_ref())?)
}

pub fn encode_features<T: Real>(m: &Matrix<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * m.data().len());
    out.extend_from_slice(&FEATURES_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix<f32>> {
    read_magic(bytes, FEATURES_MAGIC)?;
    if bytes.len() < 16 {
        return Err(Error::Truncated {
            needed: 16,
            found: bytes.len() as u64,
        });
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = u32_at(bytes, 8) as usize;
    let cols = u32_at(bytes, 12) as usize;
    let needed = 16 + 4 * (rows as u64) * (cols as u64);
    if (bytes.len() as u64) < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() as u64 != needed {
        return Err(Error::Header(format!(
            "{} trailing bytes",
            bytes.len() as u64 - needed
        )));
    }
    let data: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Header(
            "feature file contains non-finite values".into(),
        ));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn save_features<T: Real>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    let path = path.as_ref();
    if is_csv(path) {
        return save_matrix_csv(path, m);
    }
    fs::write(path, encode_features(m))?;
    Ok(())
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Load a DKWF file, or CSV when the path ends in `.csv`.
pub fn load_features(path: impl AsRef<Path>) -> Result<Matrix<f64>> {
    let path = path.as_ref();
    if is_csv(path) {
        return load_matrix_csv(path);
    }
    Ok(decode_features(&read_file(path)?)?.cast())
}

/// Load features and check them against the model's `T × F`.
pub fn load_features_for(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Matrix<f64>> {
    let m = load_features(path)?;
    if m.shape() != (config.seq_tokens, config.feature_dim) {
        return Err(Error::shape(
            "features",
            m.shape(),
            (config.seq_tokens, config.feature_dim),
        ));
    }
    Ok(m)
}

pub fn write_matrix_csv<T: Real, W: Write>(out: W, m: &Matrix<T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record([m.rows().to_string(), m.cols().to_string()])
        .map_err(csv_err)?;
    for r in 0..m.rows() {
        w.write_record(m.row(r).iter().map(|v| v.as_f64().to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_matrix_csv<T: Real>(path: impl AsRef<Path>, m: &Matrix<T>) -> Result<()> {
    write_matrix_csv(fs::File::create(path)?, m)
}

pub fn read_matrix_csv(text: &str) -> Result<Matrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let dims = records
        .next()
        .ok_or_else(|| Error::Csv("missing rows,cols line".into()))?
        .map_err(|e| Error::Csv(e.to_string()))?;
    let parse_dim = |i: usize| -> Result<usize> {
        dims.get(i)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Csv("first line must be <rows>,<cols>".into()))
    };
    if dims.len() != 2 {
        return Err(Error::Csv("first line must be <rows>,<cols>".into()));
    }
    let (rows, cols) = (parse_dim(0)?, parse_dim(1)?);
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for rec in records {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        if rec.len() != cols {
            return Err(Error::Csv(format!(
                "row {seen} has {} values, expected {cols}",
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Csv(format!("bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Csv(format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Csv(format!("expected {rows} rows, found {seen}")));
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<Matrix<f64>> {
    let bytes = read_file(path.as_ref())?;
    read_matrix_csv(std::str::from_utf8(&bytes).map_err(|e| Error::Csv(e.to_string()))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Column order of the per-run CSV report.
pub const REPORT_COLUMNS: [&str; 14] = [
    "input_id",
    "theta_x",
    "theta_q",
    "theta_k",
    "theta_att",
    "theta_softmax",
    "theta_head",
    "pct_proj",
    "pct_scores",
    "pct_context",
    "pct_headproj",
    "pct_total",
    "speedup",
    "predicted_class",
];

/// One evaluated input. `thresholds` is `None` for dense runs, whose
/// threshold cells are left empty.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub input_id: String,
    pub thresholds: Option<ThresholdConfig>,
    pub report: MacReport,
    pub logits: Vec<f64>,
    pub predicted_class: usize,
}

pub fn fmt_pct(fraction: f64) -> String {
    format!("{:.2}", fraction * 100.0)
}

pub fn fmt_speedup(s: f64) -> String {
    format!("{s:.2}")
}

impl RunRecord {
    /// Cells in [`REPORT_COLUMNS`] order.
    pub fn csv_cells(&self) -> Vec<String> {
        let r = &self.report;
        let mut cells = vec![self.input_id.clone()];
        match self.thresholds {
            Some(t) => cells.extend(t.to_array().iter().map(f64::to_string)),
            None => cells.extend(std::iter::repeat_n(String::new(), 6)),
        }
        cells.extend(StageId::MHSA.iter().map(|&s| fmt_pct(r.stage_fraction(s))));
        cells.push(fmt_pct(r.total_fraction()));
        cells.push(fmt_speedup(r.speedup()));
        cells.push(self.predicted_class.to_string());
        cells
    }

    pub fn to_json(&self) -> serde_json::Value {
        let r = &self.report;
        let counter = |c: &crate::MacCounter| {
            serde_json::json!({
                "executed": c.executed,
                "dense_equivalent": c.dense_equivalent,
                "overhead_ops": c.overhead_ops,
            })
        };
        let layers: Vec<_> = r
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let stages: serde_json::Map<_, _> = StageId::ALL
                    .iter()
                    .map(|&s| (s.name().to_string(), counter(l.stage(s))))
                    .collect();
                let sites: serde_json::Map<_, _> = Site::ALL
                    .iter()
                    .map(|&s| {
                        let c = l.sites[s.index()];
                        (
                            s.name().to_string(),
                            serde_json::json!({"retained": c.retained, "candidates": c.candidates}),
                        )
                    })
                    .collect();
                serde_json::json!({
                    "layer": i,
                    "stages": stages,
                    "sites": sites,
                    "softmax_fallbacks": l.softmax_fallbacks,
                })
            })
            .collect();
        let thresholds = self.thresholds.map(|t| {
            serde_json::json!({
                "theta_x": t.theta_x,
                "theta_q": t.theta_q,
                "theta_k": t.theta_k,
                "theta_att": t.theta_att,
                "theta_softmax": t.theta_softmax,
                "theta_head": t.theta_head,
            })
        });
        serde_json::json!({
            "input_id": self.input_id,
            "mode": if self.thresholds.is_some() { "delta" } else { "dense" },
            "thresholds": thresholds,
            "pct_proj": fmt_pct(r.stage_fraction(StageId::ProjQKV)),
            "pct_scores": fmt_pct(r.stage_fraction(StageId::AttScores)),
            "pct_context": fmt_pct(r.stage_fraction(StageId::AttContext)),
            "pct_headproj": fmt_pct(r.stage_fraction(StageId::HeadProj)),
            "pct_total": fmt_pct(r.total_fraction()),
            "pct_total_stage_mean": fmt_pct(r.total_fraction_stage_mean()),
            "speedup": fmt_speedup(r.speedup()),
            "predicted_class": self.predicted_class,
            "logits": self.logits,
            "mlp": counter(&r.stage_total(StageId::Mlp)),
            "softmax_fallbacks": r.softmax_fallbacks(),
            "layers": layers,
        })
    }
}

pub fn render_report(records: &[RunRecord], format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Csv(e.to_string());
            w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
            for rec in records {
                w.write_record(rec.csv_cells()).map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::Csv(e.to_string()))
        }
        ReportFormat::Json => {
            let value = if records.len() == 1 {
                records[0].to_json()
            } else {
                serde_json::Value::Array(records.iter().map(RunRecord::to_json).collect())
            };
            let mut out =
                serde_json::to_vec_pretty(&value).map_err(|e| Error::Header(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
    }
}

/// Write a run report. The file is only created once rendering succeeded.
pub fn emit_report(
    records: &[RunRecord],
    format: ReportFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = render_report(records, format)?;
    fs::write(path, bytes)?;
    Ok(())
}
