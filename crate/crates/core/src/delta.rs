//! Threshold delta encoding and the three kernels that consume deltas.
//!
//! A row is compared with a per-site reference row; only components whose
//! change strictly exceeds the threshold are emitted, and only those
//! components of the reference advance. Downstream kernels are exact with
//! respect to the reference trajectory:
//!
//! - [`delta_matmul_row`] keeps `reference · W` current by adding
//!   `Δ · W` (cost `nnz(Δ) × W.cols`).
//! - [`delta_delta_product`] builds `Â · B̂` for two delta-encoded operands
//!   with a 2-D recurrence whose interior cost is the overlap of the two
//!   sparse supports.
//! - [`delta_softmax_update`] rescales the previous softmax row by
//!   `exp(Δ)` numerators and a ratio-of-sums denominator.

use crate::tensor::MacCounter;
use crate::{Error, Matrix, Real, Result};

/// Sparse row of retained deltas. Indices are strictly increasing and no
/// stored value is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDelta<T> {
    indices: Vec<usize>,
    values: Vec<T>,
    dim: usize,
}

impl<T: Real> SparseDelta<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
            dim,
        }
    }

    /// Build from `(index, value)` pairs. Zero values are dropped; indices
    /// must be strictly increasing and below `dim`.
    pub fn from_pairs(dim: usize, pairs: &[(usize, T)]) -> Result<Self> {
        let mut out = Self::empty(dim);
        for &(i, v) in pairs {
            if i >= dim || out.indices.last().is_some_and(|&last| last >= i) {
                return Err(Error::Config(format!(
                    "delta index {i} out of order or beyond {dim}"
                )));
            }
            if v != T::zero() {
                out.indices.push(i);
                out.values.push(v);
            }
        }
        Ok(out)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, T)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    pub fn to_dense(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim];
        for (i, v) in self.iter() {
            out[i] = v;
        }
        out
    }
}

/// Per-site encoder state: the reference row and, when the site feeds a
/// delta-regular product, the running output `reference · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRowState<T> {
    pub reference: Vec<T>,
    pub accumulated_output: Option<Vec<T>>,
}

impl<T: Real> DeltaRowState<T> {
    /// Reference initialised to zeros, no output accumulator.
    pub fn zeroed(dim: usize) -> Self {
        Self {
            reference: vec![T::zero(); dim],
            accumulated_output: None,
        }
    }

    pub fn new(reference: Vec<T>) -> Self {
        Self {
            reference,
            accumulated_output: None,
        }
    }

    pub fn with_output(reference: Vec<T>, output: Vec<T>) -> Self {
        Self {
            reference,
            accumulated_output: Some(output),
        }
    }
}

fn check_theta<T: Real>(theta: T) -> Result<()> {
    if theta.is_nan() || theta < T::zero() {
        return Err(Error::Config(format!(
            "threshold must be non-negative, got {theta}"
        )));
    }
    Ok(())
}

/// Encode `x` against the state's reference. A component is emitted iff
/// `|x[i] - reference[i]| > theta`; emitted components overwrite the
/// reference, the rest leave it frozen.
pub fn encode_row<T: Real>(
    x: &[T],
    state: &mut DeltaRowState<T>,
    theta: T,
) -> Result<SparseDelta<T>> {
    check_theta(theta)?;
    if x.len() != state.reference.len() {
        return Err(Error::shape(
            "encode_row",
            (1, x.len()),
            (1, state.reference.len()),
        ));
    }
    let mut out = SparseDelta::empty(x.len());
    for (i, (&xi, r)) in x.iter().zip(state.reference.iter_mut()).enumerate() {
        let d = xi - *r;
        if d.abs() > theta && d != T::zero() {
            out.indices.push(i);
            out.values.push(d);
            *r = xi;
        }
    }
    Ok(out)
}

/// `acc += Δ · W`, touching only the rows of `w` named by the delta.
pub fn delta_matmul_into<T: Real>(
    delta: &SparseDelta<T>,
    w: &Matrix<T>,
    acc: &mut [T],
    counter: &mut MacCounter,
) -> Result<()> {
    if delta.dim != w.rows() || acc.len() != w.cols() {
        return Err(Error::shape("delta_matmul_row", (1, delta.dim), w.shape()));
    }
    for (k, v) in delta.iter() {
        for (o, &wk) in acc.iter_mut().zip(w.row(k)) {
            *o = *o + v * wk;
        }
    }
    counter.executed += (delta.nnz() * w.cols()) as u64;
    counter.dense_equivalent += (w.rows() * w.cols()) as u64;
    Ok(())
}

/// Delta-regular product `R(t) = Δ(t)·W + R(t-1)`. Updates and returns the
/// state's accumulated output.
pub fn delta_matmul_row<T: Real>(
    delta: &SparseDelta<T>,
    w: &Matrix<T>,
    state: &mut DeltaRowState<T>,
    counter: &mut MacCounter,
) -> Result<Vec<T>> {
    let acc = state
        .accumulated_output
        .as_mut()
        .ok_or_else(|| Error::Config("delta_matmul_row needs an accumulated output".into()))?;
    delta_matmul_into(delta, w, acc, counter)?;
    Ok(acc.clone())
}

/// Dot product over the shared support of two sparse rows. Returns the
/// value and the number of multiplications (the overlap size).
pub fn sparse_overlap_dot<T: Real>(a: &SparseDelta<T>, b: &SparseDelta<T>) -> Result<(T, usize)> {
    if a.dim != b.dim {
        return Err(Error::shape("sparse_overlap_dot", (1, a.dim), (1, b.dim)));
    }
    let (mut i, mut j) = (0, 0);
    let mut sum = T::zero();
    let mut macs = 0;
    while i < a.indices.len() && j < b.indices.len() {
        match a.indices[i].cmp(&b.indices[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                sum = sum + a.values[i] * b.values[j];
                macs += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok((sum, macs))
}

#[inline]
fn dense_dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
fn sparse_dense_dot<T: Real>(d: &SparseDelta<T>, dense: &[T]) -> T {
    d.iter().fold(T::zero(), |s, (k, v)| s + v * dense[k])
}

/// Product of two delta-encoded operands.
///
/// `A` is described by one or two dense anchor rows followed by row deltas;
/// `B` by one or two dense anchor columns followed by column deltas. Deltas
/// are only allowed on an operand with two anchors, since the chain
/// reference starts at the second anchor. Returns the full `m × n` product of
/// the reconstructed operands `Â · B̂`:
///
/// - anchor × anchor cells are dense dot products,
/// - anchor rows extend rightward: `r(i,j) = r(i,j-1) + Â_i · ΔB_j`,
/// - anchor columns extend downward: `r(i,j) = r(i-1,j) + ΔA_i · B̂_j`,
/// - interior cells: `r(i,j) = r(i-1,j) + r(i,j-1) - r(i-1,j-1) + ΔA_i · ΔB_j`.
pub fn delta_delta_product<T: Real>(
    a_anchor_rows: &[&[T]],
    a_deltas: &[SparseDelta<T>],
    b_anchor_cols: &[&[T]],
    b_deltas: &[SparseDelta<T>],
    counter: &mut MacCounter,
) -> Result<Matrix<T>> {
    let ra = a_anchor_rows.len();
    let rb = b_anchor_cols.len();
    if !(1..=2).contains(&ra) || !(1..=2).contains(&rb) {
        return Err(Error::Config(
            "delta_delta_product needs one or two anchors per operand".into(),
        ));
    }
    if (ra < 2 && !a_deltas.is_empty()) || (rb < 2 && !b_deltas.is_empty()) {
        return Err(Error::Config("deltas require two anchors".into()));
    }
    let inner = a_anchor_rows[0].len();
    let a_ok =
        a_anchor_rows.iter().all(|r| r.len() == inner) && a_deltas.iter().all(|d| d.dim == inner);
    let b_ok =
        b_anchor_cols.iter().all(|c| c.len() == inner) && b_deltas.iter().all(|d| d.dim == inner);
    if !a_ok || !b_ok {
        let b_inner = b_anchor_cols[0].len();
        return Err(Error::shape(
            "delta_delta_product",
            (ra + a_deltas.len(), inner),
            (b_inner, rb + b_deltas.len()),
        ));
    }

    let m = ra + a_deltas.len();
    let n = rb + b_deltas.len();
    let mut r = Matrix::zeros(m, n);
    let mut executed = 0usize;

    for i in 0..m {
        for j in 0..n {
            let v = match (i < ra, j < rb) {
                (true, true) => {
                    executed += inner;
                    dense_dot(a_anchor_rows[i], b_anchor_cols[j])
                }
                (true, false) => {
                    let d = &b_deltas[j - rb];
                    executed += d.nnz();
                    r.get(i, j - 1) + sparse_dense_dot(d, a_anchor_rows[i])
                }
                (false, true) => {
                    let d = &a_deltas[i - ra];
                    executed += d.nnz();
                    r.get(i - 1, j) + sparse_dense_dot(d, b_anchor_cols[j])
                }
                (false, false) => {
                    let (dd, macs) = sparse_overlap_dot(&a_deltas[i - ra], &b_deltas[j - rb])?;
                    executed += macs;
                    r.get(i - 1, j) + r.get(i, j - 1) - r.get(i - 1, j - 1) + dd
                }
            };
            r.set(i, j, v);
        }
    }
    counter.executed += executed as u64;
    counter.dense_equivalent += (m * n * inner) as u64;
    Ok(r)
}

/// Incremental softmax state for one row position of one head.
///
/// `prev_softmax[i] * exp_sum == exp(reference[i] - shift)`, where `shift` is
/// the row maximum used when the state was last built densely.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSoftmaxState<T> {
    pub prev_softmax: Vec<T>,
    pub exp_sum: T,
    pub shift: T,
}

impl<T: Real> DeltaSoftmaxState<T> {
    /// Dense, max-subtracted softmax of `logits`.
    pub fn from_logits(logits: &[T], counter: &mut MacCounter) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Empty("softmax row"));
        }
        let shift = logits.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let mut e: Vec<T> = logits.iter().map(|&x| (x - shift).exp()).collect();
        let exp_sum = e.iter().fold(T::zero(), |s, &x| s + x);
        if !exp_sum.is_finite() || exp_sum <= T::zero() {
            return Err(Error::NumericRange("softmax"));
        }
        for x in e.iter_mut() {
            *x = *x / exp_sum;
        }
        counter.overhead_ops += 2 * logits.len() as u64;
        Ok(Self {
            prev_softmax: e,
            exp_sum,
            shift,
        })
    }
}

/// Advance the softmax row by sparse logit deltas:
/// `p_new[i] = p[i] · NOM[i] / DENOM` with `NOM[i] = exp(Δr_i)` (1 where
/// nothing was retained) and `DENOM = E_new / E`, where the new exponential
/// sum is built sparsely as `E + Σ p[i]·E·(exp(Δr_i) - 1)`.
///
/// Counts only overhead operations. On overflow or underflow of the
/// exponentials the state is left untouched and [`Error::NumericRange`] is
/// returned; the caller recomputes the row densely.
pub fn delta_softmax_update<T: Real>(
    state: &mut DeltaSoftmaxState<T>,
    delta_logits: &SparseDelta<T>,
    counter: &mut MacCounter,
) -> Result<Vec<T>> {
    let n = state.prev_softmax.len();
    if delta_logits.dim != n {
        return Err(Error::shape(
            "delta_softmax_update",
            (1, delta_logits.dim),
            (1, n),
        ));
    }
    if delta_logits.is_empty() {
        return Ok(state.prev_softmax.clone());
    }
    let e = state.exp_sum;
    let mut noms = Vec::with_capacity(delta_logits.nnz());
    let mut new_sum = e;
    for (i, d) in delta_logits.iter() {
        let nom = d.exp();
        if !nom.is_finite() || nom <= T::zero() {
            return Err(Error::NumericRange("delta softmax numerator"));
        }
        new_sum = new_sum + state.prev_softmax[i] * e * (nom - T::one());
        noms.push(nom);
    }
    if !new_sum.is_finite() || new_sum <= T::zero() {
        return Err(Error::NumericRange("delta softmax denominator"));
    }
    let scale = e / new_sum;
    let p = &mut state.prev_softmax;
    for x in p.iter_mut() {
        *x = *x * scale;
    }
    for (&i, &nom) in delta_logits.indices.iter().zip(&noms) {
        p[i] = p[i] * nom;
    }
    state.exp_sum = new_sum;

    let nnz = delta_logits.nnz() as u64;
    // exp + two multiplies per retained entry, one division, the scaling
    // pass, and the numerator multiplies
    counter.overhead_ops += 3 * nnz + 1 + n as u64 + nnz;
    Ok(p.clone())
}
