//! Dense f64 linear algebra and masked attention kernels.
//!
//! Everything here is deterministic: identical inputs produce bit-identical
//! outputs regardless of thread count, because each output row is accumulated
//! in a fixed order. All compute and storage is 64-bit.

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RealMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> RealMatrix {
        let mut out = RealMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`, accumulated row by row (i,k,j loop order).
    pub fn matmul(&self, other: &RealMatrix) -> RealMatrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = RealMatrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        out
    }

    pub fn add_assign(&mut self, other: &RealMatrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &RealMatrix) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `out = a * b` without allocating.
pub fn matmul_into(a: &RealMatrix, b: &RealMatrix, out: &mut RealMatrix) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(out.rows, a.rows);
    assert_eq!(out.cols, b.cols);
    let m = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * m..(i + 1) * m];
        out_row.iter_mut().for_each(|x| *x = 0.0);
        let a_row = &a.data[i * a.cols..(i + 1) * a.cols];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// Attention visibility structure: `allowed[q][k]` marks which key positions
/// each query row may attend to.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub q_len: usize,
    pub k_len: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    /// Builds a mask from a predicate, rejecting any all-masked query row.
    pub fn from_fn(q_len: usize, k_len: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = Vec::with_capacity(q_len * k_len);
        for q in 0..q_len {
            let mut any = false;
            for k in 0..k_len {
                let a = f(q, k);
                any |= a;
                allowed.push(a);
            }
            if !any {
                return Err(Error::InvalidMask(format!("query row {q} has no allowed keys")));
            }
        }
        Ok(Self { q_len, k_len, allowed })
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.k_len + k]
    }

    #[inline]
    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.k_len..(q + 1) * self.k_len]
    }

    /// Total number of (query, key) pairs this mask admits.
    pub fn allowed_pairs(&self) -> u64 {
        self.allowed.iter().filter(|&&a| a).count() as u64
    }
}

/// Global instrumentation of (query, key) pairs actually evaluated by
/// `masked_attention`. Used by tests to cross-check the analytic cost
/// accounting reported by the decoders. Reset/read only from
/// single-session test code; concurrent sessions share the counter.
pub mod pair_meter {
    use super::*;

    static EVALUATED_PAIRS: AtomicU64 = AtomicU64::new(0);

    pub fn reset() {
        EVALUATED_PAIRS.store(0, Ordering::Relaxed);
    }

    pub fn read() -> u64 {
        EVALUATED_PAIRS.load(Ordering::Relaxed)
    }

    pub(super) fn add(n: u64) {
        EVALUATED_PAIRS.fetch_add(n, Ordering::Relaxed);
    }
}

/// Row-wise numerically stabilized softmax (row-max subtraction).
pub fn softmax_rows(m: &RealMatrix) -> Result<RealMatrix> {
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows input".into()));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Stabilized softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Scaled dot-product attention restricted to the mask.
///
/// Row i of the output is the softmax over allowed keys j of
/// `scale * (q_i . k_j)` applied as weights to the value rows. Disallowed
/// keys receive exactly zero weight: their scores are never exponentiated.
pub fn masked_attention(
    q: &RealMatrix,
    k: &RealMatrix,
    v: &RealMatrix,
    mask: &AttnMask,
    scale: f64,
) -> Result<RealMatrix> {
    if q.rows != mask.q_len || k.rows != mask.k_len || v.rows != mask.k_len {
        return Err(Error::InvalidInput(format!(
            "attention shapes q={} k={} v={} vs mask {}x{}",
            q.rows, k.rows, v.rows, mask.q_len, mask.k_len
        )));
    }
    if q.cols != k.cols {
        return Err(Error::InvalidInput(format!(
            "query dim {} != key dim {}",
            q.cols, k.cols
        )));
    }
    let mut evaluated: u64 = 0;
    let mut out = RealMatrix::zeros(q.rows, v.cols);
    let mut scores: Vec<f64> = Vec::new();
    let mut idx: Vec<usize> = Vec::new();
    for i in 0..q.rows {
        scores.clear();
        idx.clear();
        let qi = q.row(i);
        let mrow = mask.row(i);
        for (j, &ok) in mrow.iter().enumerate() {
            if !ok {
                continue;
            }
            let kj = k.row(j);
            let dot: f64 = qi.iter().zip(kj.iter()).map(|(a, b)| a * b).sum();
            scores.push(scale * dot);
            idx.push(j);
        }
        if idx.is_empty() {
            return Err(Error::InvalidMask(format!("query row {i} has no allowed keys")));
        }
        evaluated += idx.len() as u64;
        softmax_in_place(&mut scores);
        let orow = out.row_mut(i);
        for (w, &j) in scores.iter().zip(idx.iter()) {
            let vj = v.row(j);
            for (o, &vv) in orow.iter_mut().zip(vj.iter()) {
                *o += w * vv;
            }
        }
    }
    pair_meter::add(evaluated);
    Ok(out)
}

/// Index of the largest entry among indices where `allowed` holds. Ties go
/// to the lower index. Returns None if nothing is allowed.
pub fn argmax_where(row: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        if !allowed(i) {
            continue;
        }
        match best {
            Some((_, bv)) if bv >= v => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Affine map `x * w + b`, with b broadcast over rows.
pub fn linear(x: &RealMatrix, w: &RealMatrix, b: &[f64]) -> Result<RealMatrix> {
    if x.cols != w.rows {
        return Err(Error::InvalidInput(format!(
            "linear shape mismatch: x {}x{} vs w {}x{}",
            x.rows, x.cols, w.rows, w.cols
        )));
    }
    if b.len() != w.cols {
        return Err(Error::InvalidInput(format!(
            "bias length {} != output dim {}",
            b.len(),
            w.cols
        )));
    }
    let mut out = x.matmul(w);
    for i in 0..out.rows {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b.iter()) {
            *o += bv;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_row() {
        let m = RealMatrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert_eq!(s.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logits_no_overflow() {
        let m = RealMatrix::from_vec(1, 2, vec![1000.0, 0.0]).unwrap();
        let s = softmax_rows(&m).unwrap();
        assert!(s.at(0, 0) > 1.0 - 1e-12);
        assert!(s.at(0, 1) < 1e-12);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_rows_sum_to_one_vs_direct_oracle() {
        // Oracle: direct exp/sum without stabilization on inputs small
        // enough not to overflow.
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0
        };
        let m = RealMatrix::from_fn(3, 4, |_, _| next());
        let s = softmax_rows(&m).unwrap();
        for i in 0..3 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            let denom: f64 = m.row(i).iter().map(|&x| x.exp()).sum();
            for j in 0..4 {
                let direct = m.at(i, j).exp() / denom;
                assert!((s.at(i, j) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let m = RealMatrix::from_vec(1, 2, vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(softmax_rows(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn attention_diagonal_mask_selects_values() {
        let n = 4;
        let d = 3;
        let q = RealMatrix::from_fn(n, d, |i, j| (i * d + j) as f64 * 0.1);
        let k = RealMatrix::from_fn(n, d, |i, j| ((i + j) % 5) as f64);
        let v = RealMatrix::from_fn(n, d, |i, j| (i * 10 + j) as f64);
        let mask = AttnMask::from_fn(n, n, |a, b| a == b).unwrap();
        let out = masked_attention(&q, &k, &v, &mask, 1.0).unwrap();
        for i in 0..n {
            for j in 0..d {
                assert!((out.at(i, j) - v.at(i, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn attention_full_mask_matches_reference() {
        let n = 5;
        let d = 4;
        let q = RealMatrix::from_fn(n, d, |i, j| ((i + 2 * j) as f64).sin());
        let k = RealMatrix::from_fn(n, d, |i, j| ((3 * i + j) as f64).cos());
        let v = RealMatrix::from_fn(n, d, |i, j| (i as f64 - j as f64) * 0.5);
        let mask = AttnMask::from_fn(n, n, |_, _| true).unwrap();
        let scale = 0.5;
        let out = masked_attention(&q, &k, &v, &mask, scale).unwrap();

        // Unmasked reference: softmax(scale * q k^T) v.
        let scores = {
            let mut s = q.matmul(&k.transpose());
            s.scale(scale);
            softmax_rows(&s).unwrap()
        };
        let reference = scores.matmul(&v);
        assert!(out.max_abs_diff(&reference) < 1e-12);
    }

    #[test]
    fn attention_ignores_disallowed_keys() {
        // Block-causal style mask: queries in the first half never see the
        // second half; perturbing those keys/values must not change output.
        let n = 6;
        let d = 2;
        let q = RealMatrix::from_fn(n, d, |i, j| (i + j) as f64 * 0.3);
        let k = RealMatrix::from_fn(n, d, |i, j| (i * j + 1) as f64 * 0.2);
        let v = RealMatrix::from_fn(n, d, |i, j| (i + 7 * j) as f64 * 0.1);
        let mask = AttnMask::from_fn(n, n, |a, b| b <= a.max(2)).unwrap();

        let out1 = masked_attention(&q, &k, &v, &mask, 1.0).unwrap();
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 4..n {
            for c in 0..d {
                k2.set(j, c, 99.0 + j as f64);
                v2.set(j, c, -55.0);
            }
        }
        let out2 = masked_attention(&q, &k2, &v2, &mask, 1.0).unwrap();
        // Rows 0..=2 only see keys 0..=2, so they are untouched.
        for i in 0..3 {
            for j in 0..d {
                assert_eq!(out1.at(i, j).to_bits(), out2.at(i, j).to_bits());
            }
        }
    }

    #[test]
    fn attention_rejects_all_masked_row() {
        assert!(AttnMask::from_fn(2, 2, |q, _| q == 0).is_err());
    }

    #[test]
    fn pair_meter_counts_allowed_pairs() {
        let n = 4;
        let q = RealMatrix::zeros(n, 2);
        let k = RealMatrix::zeros(n, 2);
        let v = RealMatrix::zeros(n, 2);
        let mask = AttnMask::from_fn(n, n, |a, b| b <= a).unwrap();
        pair_meter::reset();
        masked_attention(&q, &k, &v, &mask, 1.0).unwrap();
        assert_eq!(pair_meter::read(), mask.allowed_pairs());
        assert_eq!(pair_meter::read(), 10);
    }

    #[test]
    fn linear_identity_and_zero() {
        let x = RealMatrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        let eye = RealMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let out = linear(&x, &eye, &[0.0; 3]).unwrap();
        assert_eq!(out.data, x.data);

        let zero = RealMatrix::zeros(2, 3);
        let w = RealMatrix::from_fn(3, 4, |i, j| (i + j) as f64);
        let b = [1.0, 2.0, 3.0, 4.0];
        let out = linear(&zero, &w, &b).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), &b);
        }
    }

    #[test]
    fn linear_matches_triple_loop() {
        let x = RealMatrix::from_fn(2, 3, |i, j| (i as f64 + 1.0) * (j as f64 - 0.5));
        let w = RealMatrix::from_fn(3, 2, |i, j| (i as f64 * 2.0 - j as f64) * 0.25);
        let b = [0.5, -0.5];
        let out = linear(&x, &w, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = b[j];
                for kk in 0..3 {
                    acc += x.at(i, kk) * w.at(kk, j);
                }
                assert!((out.at(i, j) - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let x = RealMatrix::zeros(2, 3);
        let w = RealMatrix::zeros(4, 2);
        assert!(matches!(linear(&x, &w, &[0.0, 0.0]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kernels_are_deterministic() {
        let n = 8;
        let q = RealMatrix::from_fn(n, 4, |i, j| ((i * 31 + j * 17) as f64).sin());
        let k = RealMatrix::from_fn(n, 4, |i, j| ((i * 13 + j * 7) as f64).cos());
        let v = RealMatrix::from_fn(n, 4, |i, j| i as f64 * 0.3 - j as f64);
        let mask = AttnMask::from_fn(n, n, |a, b| b <= a || b == n - 1).unwrap();
        let a = masked_attention(&q, &k, &v, &mask, 0.5).unwrap();
        let b = masked_attention(&q, &k, &v, &mask, 0.5).unwrap();
        assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
