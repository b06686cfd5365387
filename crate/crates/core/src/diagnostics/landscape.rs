//! Loss-landscape comparison on the plane spanned by the first principal
//! component of the inputs and of the targets. Each grid cell holds the
//! cell's contribution to the empirical loss and to the oracle (ideal) loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DiagnosticsError, TrainedModel};
use crate::dataset::Dataset;
use crate::neural::LossKind;

type Result<T> = std::result::Result<T, DiagnosticsError>;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 100_000;

/// Dominant eigenpair of a symmetric positive semidefinite matrix. The
/// vector is unit length with its largest-magnitude entry positive.
pub fn power_iteration(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let n = m.nrows();
    if n == 0 || m.trace() <= 0.0 {
        return Err(DiagnosticsError::DegenerateCovariance);
    }
    // deterministic start with components in every direction
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * i as f64);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..POWER_MAX_ITER {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return Err(DiagnosticsError::DegenerateCovariance);
        }
        let next = w / norm;
        let delta = (&next - &v).norm();
        v = next;
        lambda = norm;
        if delta < POWER_TOL {
            break;
        }
    }
    let imax = v.iamax();
    if v[imax] < 0.0 {
        v = -v;
    }
    Ok((lambda, v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAxis {
    pub mean: Vec<f64>,
    pub direction: Vec<f64>,
    pub variance: f64,
}

impl PrincipalAxis {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone) -> Result<Self> {
        let n = rows.clone().count();
        let Some(d) = rows.clone().next().map(<[f64]>::len) else {
            return Err(DiagnosticsError::EmptyInput);
        };
        let mut mean = vec![0.0; d];
        for r in rows.clone() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in rows {
            let c = DVector::from_iterator(d, r.iter().zip(&mean).map(|(v, m)| v - m));
            cov += &c * c.transpose();
        }
        cov /= n as f64;
        let (variance, dir) = power_iteration(&cov)?;
        Ok(Self {
            mean,
            direction: dir.iter().copied().collect(),
            variance,
        })
    }

    pub fn project(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.direction)
            .map(|((v, m), d)| (v - m) * d)
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    pub row: usize,
    pub col: usize,
    /// Cell center in projected input coordinates.
    pub x: f64,
    /// Cell center in projected target coordinates.
    pub y: f64,
    pub empirical: f64,
    pub ideal: f64,
    pub abs_diff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub input_axis: PrincipalAxis,
    pub target_axis: PrincipalAxis,
    pub cells: Vec<LandscapeCell>,
}

impl Landscape {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,x,y,empirical,ideal,abs_diff\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e}\n",
                c.row, c.col, c.x, c.y, c.empirical, c.ideal, c.abs_diff
            ));
        }
        s
    }
}

/// Grid of `|empirical - ideal|` loss contributions. Axes are fitted on the
/// oracle sample; points beyond its range land in the edge cells.
pub fn landscape_projection(
    empirical: &Dataset,
    ideal: &Dataset,
    model: &TrainedModel,
    kind: LossKind,
    resolution: usize,
) -> Result<Landscape> {
    if empirical.is_empty() || resolution == 0 {
        return Err(DiagnosticsError::EmptyInput);
    }
    if ideal.len() < 10 * empirical.len() {
        return Err(DiagnosticsError::InsufficientOracle {
            needed: 10 * empirical.len(),
            found: ideal.len(),
        });
    }
    let input_axis = PrincipalAxis::fit(ideal.samples().iter().map(|s| s.features.as_slice()))?;
    let target_axis = PrincipalAxis::fit(ideal.samples().iter().map(|s| s.target.as_slice()))?;
    let proj = |d: &Dataset| -> Vec<(f64, f64)> {
        d.samples()
            .iter()
            .map(|s| (input_axis.project(&s.features), target_axis.project(&s.target)))
            .collect()
    };
    let pi = proj(ideal);
    let pe = proj(empirical);
    let range = |f: fn(&(f64, f64)) -> f64| {
        pi.iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let r = resolution;
    let cell = |v: f64, lo: f64, hi: f64| -> usize {
        if hi <= lo {
            return 0;
        }
        (((v - lo) / (hi - lo) * r as f64).floor().max(0.0) as usize).min(r - 1)
    };
    let accumulate = |d: &Dataset, pts: &[(f64, f64)]| -> Result<Vec<f64>> {
        let mut grid = vec![0.0; r * r];
        let norm = (d.len() * d.target_dim()) as f64;
        for (s, p) in d.samples().iter().zip(pts) {
            let f = model.predict(&s.features)?;
            let l: f64 = f.iter().zip(&s.target).map(|(a, b)| kind.point(*a, *b)).sum();
            grid[cell(p.1, y0, y1) * r + cell(p.0, x0, x1)] += l / norm;
        }
        Ok(grid)
    };
    let ge = accumulate(empirical, &pe)?;
    let gi = accumulate(ideal, &pi)?;
    let (dx, dy) = ((x1 - x0) / r as f64, (y1 - y0) / r as f64);
    let cells = (0..r * r)
        .map(|k| {
            let (row, col) = (k / r, k % r);
            LandscapeCell {
                row,
                col,
                x: x0 + (col as f64 + 0.5) * dx,
                y: y0 + (row as f64 + 0.5) * dy,
                empirical: ge[k],
                ideal: gi[k],
                abs_diff: (ge[k] - gi[k]).abs(),
            }
        })
        .collect();
    Ok(Landscape {
        input_axis,
        target_axis,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;
    use crate::neural::{init_params, Activation, NetworkSpec};

    #[test]
    fn one_dimensional_axis_is_identity() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64).cos() * 3.0]).collect();
        let ax = PrincipalAxis::fit(rows.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(ax.direction, vec![1.0]);
    }

    #[test]
    fn power_iteration_matches_dense_eigensolver() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = DMatrix::<f64>::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            let cov = &a * a.transpose();
            let (lambda, v) = power_iteration(&cov).unwrap();
            let eig = cov.clone().symmetric_eigen();
            let k = eig.eigenvalues.imax();
            let mut u = eig.eigenvectors.column(k).into_owned();
            if u[u.iamax()] < 0.0 {
                u = -u;
            }
            // a near-degenerate top pair makes the direction ill-posed
            let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            ev.sort_by(|a, b| b.total_cmp(a));
            if ev[0] - ev[1] < 1e-2 * ev[0] {
                continue;
            }
            assert!((lambda - eig.eigenvalues[k]).abs() < 1e-8 * lambda.max(1.0));
            assert!((v - u).amax() < 1e-8);
        }
    }

    #[test]
    fn degenerate_covariance() {
        let rows = [vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!(matches!(
            PrincipalAxis::fit(rows.iter().map(Vec::as_slice)),
            Err(DiagnosticsError::DegenerateCovariance)
        ));
    }

    #[test]
    fn grid_shape_and_oracle_size() {
        let mk = |n: usize| {
            Dataset::from_samples(
                (0..n)
                    .map(|i| {
                        let x = i as f64 / n as f64;
                        Sample::historical(vec![x, x * x], vec![2.0 * x])
                    })
                    .collect(),
            )
            .unwrap()
        };
        let spec = NetworkSpec::mlp(&[2, 3, 1], Activation::Tanh, None, LossKind::Mse);
        let model = TrainedModel::new(&spec, init_params(&spec, 0).unwrap(), None).unwrap();
        let g = landscape_projection(&mk(10), &mk(100), &model, LossKind::Mse, 4).unwrap();
        assert_eq!(g.cells.len(), 16);
        let total_ideal: f64 = g.cells.iter().map(|c| c.ideal).sum();
        let direct = model.loss(&mk(100), LossKind::Mse).unwrap();
        assert!((total_ideal - direct).abs() < 1e-12);
        assert_eq!(g.to_csv().lines().count(), 17);
        assert!(matches!(
            landscape_projection(&mk(10), &mk(99), &model, LossKind::Mse, 4),
            Err(DiagnosticsError::InsufficientOracle { .. })
        ));
    }
}
