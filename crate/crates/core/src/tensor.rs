//! Dense row-major `f32` numerics.
//!
//! Every reduction runs in ascending index order and nothing is fused or
//! reordered, so a row computed inside a batch is bitwise identical to the
//! same row computed alone. The cascade engine's exact-greedy guarantee
//! depends on that.

use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("matrix contains non-finite values"));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copies the selected rows, in the given order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(invalid("vstack width mismatch"));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix { rows: self.rows + other.rows, cols, data })
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// `a · b` with a fixed ascending reduction order over the inner dimension.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(invalid(format!(
            "matmul dimension mismatch: {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        matvec_into(a.row(i), &b.data, b.cols, out.row_mut(i));
    }
    Ok(out)
}

/// `out = x · w` for a row vector `x` and a row-major `w` of width `n`.
///
/// Each output element accumulates `x[k] * w[k][j]` for `k = 0, 1, ...`,
/// which is the same order `matmul` uses.
pub(crate) fn matvec_into(x: &[f32], w: &[f32], n: usize, out: &mut [f32]) {
    debug_assert_eq!(w.len(), x.len() * n);
    out.fill(0.0);
    for (k, &xk) in x.iter().enumerate() {
        let wrow = &w[k * n..(k + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xk * wv;
        }
    }
}

/// Row-wise softmax of `m / temperature`.
pub fn softmax_rows(m: &Matrix, temperature: f32) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32], temperature: f32) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `x · gain / sqrt(mean(x²) + epsilon)`.
pub fn rms_norm(x: &[f32], gain: &[f32], epsilon: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() {
        return Err(invalid(format!(
            "rms_norm length mismatch: {} vs {}",
            x.len(),
            gain.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    rms_norm_into(x, gain, epsilon, &mut out);
    Ok(out)
}

pub(crate) fn rms_norm_into(x: &[f32], gain: &[f32], epsilon: f32, out: &mut [f32]) {
    let inv = inv_rms(x, epsilon);
    for ((o, &xv), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = xv * inv * g;
    }
}

pub(crate) fn inv_rms(x: &[f32], epsilon: f32) -> f32 {
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let ms = ss / x.len() as f32 + epsilon;
    // An all-zero row with epsilon = 0 would divide by zero; its normalized
    // value is zero either way.
    if ms > 0.0 {
        1.0 / ms.sqrt()
    } else {
        0.0
    }
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax_tiebreak(v: &[f32]) -> Result<usize> {
    if v.is_empty() {
        return Err(invalid("argmax of empty vector"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_cases() {
        let s = matmul(&m(&[&[2.0]]), &m(&[&[3.0]])).unwrap();
        assert_eq!(s.data(), &[6.0]);

        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);

        let x = m(&[&[0.3, -1.5, 2.0], &[4.0, 0.0, -0.25], &[1.0, 1.0, 1.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);
        assert_eq!(matmul(&x, &Matrix::identity(3)).unwrap(), x);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0]]), 1.0).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&m(&[&[std::f32::consts::LN_2, 0.0]]), 1.0).unwrap();
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-6);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-6);
        let s = softmax_rows(&m(&[&[10.0, 0.0]]), 0.1).unwrap();
        assert!(s.get(0, 0) > 0.999999);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = m(&[&[1.0]]);
        assert!(softmax_rows(&x, 0.0).is_err());
        assert!(softmax_rows(&x, -1.0).is_err());
        assert!(softmax_rows(&x, f32::NAN).is_err());
    }

    #[test]
    fn rms_norm_cases() {
        assert_eq!(rms_norm(&[1.0; 4], &[1.0; 4], 0.0).unwrap(), vec![1.0; 4]);
        assert_eq!(rms_norm(&[0.0; 5], &[1.0; 5], 1e-6).unwrap(), vec![0.0; 5]);
        let y = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.8485).abs() < 1e-4 && (y[1] - 1.1314).abs() < 1e-4);
        assert!(rms_norm(&[1.0], &[1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn argmax_cases() {
        assert_eq!(argmax_tiebreak(&[0.1, 0.9, 0.5]).unwrap(), 1);
        assert_eq!(argmax_tiebreak(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(argmax_tiebreak(&[-1.0, -1.0, 0.0]).unwrap(), 2);
        assert!(argmax_tiebreak(&[]).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn row(n: usize) -> impl Strategy<Value = Vec<f32>> {
            proptest::collection::vec(-20.0f32..20.0, n)
        }

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(r in row(17), t in 0.05f32..5.0) {
                let s = softmax_rows(&Matrix::from_vec(1, 17, r).unwrap(), t).unwrap();
                let sum: f32 = s.data().iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }

            #[test]
            fn softmax_is_shift_invariant(r in row(9)) {
                // Shifting by the row max makes the max-subtracted logits identical bit for bit.
                let max = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let shifted: Vec<f32> = r.iter().map(|v| v - max).collect();
                let a = softmax_rows(&Matrix::from_vec(1, 9, r).unwrap(), 1.0).unwrap();
                let b = softmax_rows(&Matrix::from_vec(1, 9, shifted).unwrap(), 1.0).unwrap();
                prop_assert_eq!(a, b);
            }

            #[test]
            fn matmul_batch_rows_match_single_rows(a in row(12), b in row(12)) {
                let a = Matrix::from_vec(3, 4, a).unwrap();
                let b = Matrix::from_vec(4, 3, b).unwrap();
                let full = matmul(&a, &b).unwrap();
                for i in 0..3 {
                    let single = matmul(&a.select_rows(&[i]), &b).unwrap();
                    prop_assert_eq!(single.row(0), full.row(i));
                }
            }
        }
    }
}
