//! Minimal dense row-major matrix; just enough for the recurrent cells.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect(),
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · v + b`
    pub fn affine(&self, v: &[f64], b: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        for ((o, row), bias) in out.iter_mut().zip(self.data.chunks_exact(self.cols)).zip(b) {
            *o = bias + dot(row, v);
        }
    }

    /// `out += selfᵀ · g`
    pub fn transpose_mul_acc(&self, g: &[f64], out: &mut [f64]) {
        for (row, gi) in self.data.chunks_exact(self.cols).zip(g) {
            if *gi != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += gi * w;
                }
            }
        }
    }

    /// `self += g ⊗ v`
    pub fn outer_acc(&mut self, g: &[f64], v: &[f64]) {
        for (row, gi) in self.data.chunks_exact_mut(self.cols).zip(g) {
            if *gi != 0.0 {
                for (w, vj) in row.iter_mut().zip(v) {
                    *w += gi * vj;
                }
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_and_transpose() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let mut out = [0.0; 2];
        m.affine(&[1.0, 1.0], &[0.5, -0.5], &mut out);
        assert_eq!(out, [3.5, 6.5]);
        let mut back = [0.0; 2];
        m.transpose_mul_acc(&[1.0, 1.0], &mut back);
        assert_eq!(back, [4.0, 6.0]);
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert!((sigmoid(-800.0)).is_finite());
    }
}
