//! Token-correlation statistics over intermediate tensors.

use serde::Serialize;

use crate::{Error, Matrix, Real, Result};

/// Number of equal-width histogram bins spanning `[0, dynamic_range]`.
pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationStats {
    /// `max - min` over the whole tensor.
    pub dynamic_range: f64,
    pub below_fraction: f64,
    /// Counts of `|Δ|` in equal-width bins over `[0, dynamic_range]`.
    pub histogram: Vec<u64>,
}

/// Differences between consecutive rows, skipping the first `skip_rows`.
pub fn row_delta_tensor<T: Real>(m: &Matrix<T>, skip_rows: usize) -> Result<Matrix<T>> {
    if m.rows() < skip_rows + 2 {
        return Err(Error::Config(format!(
            "row deltas need at least {} rows, got {}",
            skip_rows + 2,
            m.rows()
        )));
    }
    let rows = m.rows() - skip_rows - 1;
    let mut out = Matrix::zeros(rows, m.cols());
    for t in 0..rows {
        let (a, b) = (m.row(skip_rows + t), m.row(skip_rows + t + 1));
        for ((o, &x), &y) in out.row_mut(t).iter_mut().zip(a).zip(b) {
            *o = y - x;
        }
    }
    Ok(out)
}

/// Sub-threshold statistics with the class row skipped. A tensor with fewer
/// than three rows has no deltas and reports a fraction of 1.
pub fn subthreshold_fraction<T: Real>(m: &Matrix<T>, pct_of_range: f64) -> CorrelationStats {
    subthreshold_fraction_skip(m, pct_of_range, 1)
}

pub fn subthreshold_fraction_skip<T: Real>(
    m: &Matrix<T>,
    pct_of_range: f64,
    skip_rows: usize,
) -> CorrelationStats {
    let (lo, hi) = m
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.as_f64()), hi.max(v.as_f64()))
        });
    let range = if m.data().is_empty() {
        0.0
    } else {
        (hi - lo).max(0.0)
    };
    let mut histogram = vec![0u64; HISTOGRAM_BINS];
    let Ok(deltas) = row_delta_tensor(m, skip_rows) else {
        return CorrelationStats {
            dynamic_range: range,
            below_fraction: 1.0,
            histogram,
        };
    };
    let limit = pct_of_range.max(0.0) / 100.0 * range;
    let mut below = 0usize;
    for v in deltas.data() {
        let a = v.as_f64().abs();
        if a < limit || a == 0.0 {
            below += 1;
        }
        let bin = if range > 0.0 {
            ((a / range * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1)
        } else {
            0
        };
        histogram[bin] += 1;
    }
    let n = deltas.data().len();
    CorrelationStats {
        dynamic_range: range,
        below_fraction: if range == 0.0 || n == 0 {
            1.0
        } else {
            below as f64 / n as f64
        },
        histogram,
    }
}
