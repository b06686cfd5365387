//! RBF kernel ridge regression. Inputs are min-max scaled to the unit box and
//! the kernel uses the mean squared coordinate distance,
//! `k(a, b) = exp(-gamma * mean_j (a_j - b_j)^2)`, so `gamma` keeps the same
//! meaning across input widths. Targets are centered before the solve.

use nalgebra::{DMatrix, DVector};

use super::CalibrationError;

#[derive(Clone, Debug, PartialEq)]
pub struct Scaling {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Scaling {
    pub fn fit(xs: &[&[f64]]) -> Self {
        let d = xs[0].len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for x in xs {
            for j in 0..d {
                lo[j] = lo[j].min(x[j]);
                hi[j] = hi[j].max(x[j]);
            }
        }
        let scale = lo.iter().zip(&hi).map(|(l, h)| if h > l { h - l } else { 1.0 }).collect();
        Self { offset: lo, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.offset)
            .zip(&self.scale)
            .map(|((v, o), s)| (v - o) / s)
            .collect()
    }
}

pub fn kernel(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    let d = a.len().max(1) as f64;
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * sq / d).exp()
}

pub fn gram(gamma: f64, pts: &[Vec<f64>]) -> DMatrix<f64> {
    let n = pts.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = kernel(gamma, &pts[i], &pts[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Solves `(K + ridge I) A = Y` for the coefficient matrix (one column per
/// output).
pub fn solve(gamma: f64, ridge: f64, pts: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, CalibrationError> {
    let n = pts.len();
    let out = ys[0].len();
    let mut k = gram(gamma, pts);
    for i in 0..n {
        k[(i, i)] += ridge;
    }
    let chol = k.cholesky().ok_or(CalibrationError::Singular)?;
    let mut coef = vec![vec![0.0; out]; n];
    for o in 0..out {
        let rhs = DVector::from_iterator(n, ys.iter().map(|y| y[o]));
        let a = chol.solve(&rhs);
        for i in 0..n {
            coef[i][o] = a[i];
        }
    }
    Ok(coef)
}

pub fn predict(gamma: f64, support: &[Vec<f64>], coef: &[Vec<f64>], z: &[f64], out: &mut [f64]) {
    for (s, c) in support.iter().zip(coef) {
        let k = kernel(gamma, s, z);
        for (o, ci) in out.iter_mut().zip(c) {
            *o += k * ci;
        }
    }
}
