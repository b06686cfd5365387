use nalgebra::DMatrix;

use super::CalibrationError;

/// Least-squares `y = W x + b` through an SVD of the design matrix, so
/// rank-deficient inputs get the minimum-norm solution.
pub fn least_squares(xs: &[&[f64]], ys: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<f64>), CalibrationError> {
    let n = xs.len();
    let d = xs[0].len();
    let o = ys[0].len();
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j < d { xs[i][j] } else { 1.0 });
    let rhs = DMatrix::from_fn(n, o, |i, k| ys[i][k]);
    let svd = design.svd(true, true);
    let sol = svd.solve(&rhs, 1e-12).map_err(|_| CalibrationError::Singular)?;
    let weights = (0..o).map(|k| (0..d).map(|j| sol[(j, k)]).collect()).collect();
    let intercept = (0..o).map(|k| sol[(d, k)]).collect();
    Ok((weights, intercept))
}

pub fn apply(weights: &[Vec<f64>], intercept: &[f64], x: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .zip(intercept)
        .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect()
}
