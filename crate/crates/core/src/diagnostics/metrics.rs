use serde::{Deserialize, Serialize};

use super::DiagnosticsError;

type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Quantile levels of the probabilistic forecasts.
pub const QUANTILES: [f64; 3] = [0.25, 0.5, 0.75];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub rmse: f64,
    /// Over targets with `|y| >= epsilon_y`.
    pub mape: f64,
    /// Over every nonzero target; `None` when that set is empty.
    pub mape_unguarded: Option<f64>,
    pub smape: f64,
    pub epsilon_y: f64,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    if a.len() != b.len() {
        return Err(DiagnosticsError::LengthMismatch {
            expected: b.len(),
            found: a.len(),
        });
    }
    Ok(())
}

/// Empirical `p`-quantile by linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// RMSE, guarded MAPE (in %) and sMAPE (in %). `epsilon_y` defaults to the
/// 10th percentile of `|y|`.
pub fn point_metrics(preds: &[f64], ys: &[f64], epsilon_y: Option<f64>) -> Result<PointMetrics> {
    check_pair(preds, ys)?;
    let n = ys.len() as f64;
    let abs_y: Vec<f64> = ys.iter().map(|y| y.abs()).collect();
    let eps = epsilon_y.unwrap_or_else(|| percentile(&abs_y, 0.1));
    let rmse = (preds.iter().zip(ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / n).sqrt();
    let ape = |keep: &dyn Fn(f64) -> bool| {
        let v: Vec<f64> = preds
            .iter()
            .zip(ys)
            .filter(|(_, y)| keep(y.abs()))
            .map(|(p, y)| (p - y).abs() / y.abs())
            .collect();
        (!v.is_empty()).then(|| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
    };
    let mape = ape(&|a| a >= eps && a > 0.0).ok_or(DiagnosticsError::AllTargetsBelowThreshold)?;
    let mape_unguarded = ape(&|a| a > 0.0);
    let smape = 100.0
        * preds
            .iter()
            .zip(ys)
            .map(|(p, y)| {
                let den = p.abs() + y.abs();
                if den == 0.0 {
                    0.0
                } else {
                    2.0 * (p - y).abs() / den
                }
            })
            .sum::<f64>()
        / n;
    Ok(PointMetrics {
        rmse,
        mape,
        mape_unguarded,
        smape,
        epsilon_y: eps,
    })
}

pub fn pinball(q: f64, preds: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(preds, ys)?;
    Ok(preds
        .iter()
        .zip(ys)
        .map(|(p, y)| {
            let r = y - p;
            if r > 0.0 {
                q * r
            } else {
                (q - 1.0) * r
            }
        })
        .sum::<f64>()
        / ys.len() as f64)
}

/// Interval score for the central `1 - alpha` interval `[l, u]`.
pub fn winkler_one(l: f64, u: f64, y: f64, alpha: f64) -> f64 {
    let mut s = u - l;
    if y < l {
        s += 2.0 / alpha * (l - y);
    } else if y > u {
        s += 2.0 / alpha * (y - u);
    }
    s
}

/// `100 (1 - crps / baseline)`.
pub fn crpss(crps: f64, baseline: Option<f64>) -> Result<f64> {
    let b = baseline.ok_or(DiagnosticsError::MissingBaseline)?;
    Ok(100.0 * (1.0 - crps / b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbMetrics {
    /// Pinball loss at 0.25, 0.5 and 0.75.
    pub pinball: [f64; 3],
    /// Winkler score of the 25-75% interval.
    pub winkler: f64,
    /// Quantile approximation `(2/3) sum_q pinball_q`, labeled CRPS(3q).
    pub crps: f64,
    pub crpss: Option<f64>,
}

/// Metrics of three quantile series. With `sort` each time step's quantiles
/// are reordered first so crossings cannot produce a negative width.
pub fn prob_metrics(
    q25: &[f64],
    q50: &[f64],
    q75: &[f64],
    ys: &[f64],
    baseline_crps: Option<f64>,
    sort: bool,
) -> Result<ProbMetrics> {
    for s in [q25, q50, q75] {
        check_pair(s, ys)?;
    }
    let (a, b, c): (Vec<f64>, Vec<f64>, Vec<f64>) = if sort {
        let mut a = Vec::with_capacity(ys.len());
        let mut b = Vec::with_capacity(ys.len());
        let mut c = Vec::with_capacity(ys.len());
        for i in 0..ys.len() {
            let mut v = [q25[i], q50[i], q75[i]];
            v.sort_by(f64::total_cmp);
            a.push(v[0]);
            b.push(v[1]);
            c.push(v[2]);
        }
        (a, b, c)
    } else {
        (q25.to_vec(), q50.to_vec(), q75.to_vec())
    };
    let pinball = [
        pinball(QUANTILES[0], &a, ys)?,
        pinball(QUANTILES[1], &b, ys)?,
        pinball(QUANTILES[2], &c, ys)?,
    ];
    let winkler = ys
        .iter()
        .enumerate()
        .map(|(i, &y)| winkler_one(a[i], c[i], y, 0.5))
        .sum::<f64>()
        / ys.len() as f64;
    let crps = 2.0 / 3.0 * pinball.iter().sum::<f64>();
    let crpss = baseline_crps.map(|b| crpss(crps, Some(b))).transpose()?;
    Ok(ProbMetrics {
        pinball,
        winkler,
        crps,
        crpss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn point_examples() {
        let m = point_metrics(&[1.0, 2.0], &[1.0, 2.0], None).unwrap();
        assert_eq!((m.rmse, m.mape, m.smape), (0.0, 0.0, 0.0));
        let m = point_metrics(&[110.0], &[100.0], None).unwrap();
        assert!((m.mape - 10.0).abs() < 1e-12);
        assert!((m.smape - 200.0 / 21.0).abs() < 1e-12);
        assert!((m.smape - 9.5238).abs() < 1e-4);
        assert!(matches!(
            point_metrics(&[1.0], &[0.0], None),
            Err(DiagnosticsError::AllTargetsBelowThreshold)
        ));
        assert!(matches!(point_metrics(&[], &[], None), Err(DiagnosticsError::EmptyInput)));
    }

    #[test]
    fn guard_drops_small_targets() {
        let ys = [0.01, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        let ps = [1.0, 11.0, 11.0, 11.0, 11.0, 11.0, 11.0, 11.0, 11.0, 11.0, 11.0];
        let m = point_metrics(&ps, &ys, Some(1.0)).unwrap();
        assert!((m.mape - 10.0).abs() < 1e-12);
        assert!(m.mape_unguarded.unwrap() > 100.0);
    }

    #[test]
    fn winkler_examples() {
        assert_eq!(winkler_one(1.0, 3.0, 4.0, 0.5), 6.0);
        assert_eq!(winkler_one(1.0, 3.0, 2.0, 0.5), 2.0);
        assert_eq!(winkler_one(1.0, 3.0, 0.0, 0.5), 6.0);
    }

    #[test]
    fn crpss_table_value() {
        let s = crpss(4.233, Some(5.315)).unwrap();
        assert!((s - 20.357).abs() < 1e-3, "{s}");
        assert!(matches!(crpss(1.0, None), Err(DiagnosticsError::MissingBaseline)));
    }

    #[test]
    fn perfect_quantiles_score_zero() {
        let y = [3.0, -1.0, 2.5];
        let m = prob_metrics(&y, &y, &y, &y, Some(2.0), false).unwrap();
        assert_eq!(m.pinball, [0.0; 3]);
        assert_eq!((m.winkler, m.crps), (0.0, 0.0));
        assert_eq!(m.crpss, Some(100.0));
    }

    proptest! {
        #[test]
        fn pinball_median_is_half_mae(pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..50)) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mae = p.iter().zip(&y).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64;
            prop_assert!((pinball(0.5, &p, &y).unwrap() - 0.5 * mae).abs() < 1e-9);
        }

        #[test]
        fn winkler_at_least_width(l in -10.0f64..10.0, w in 0.0f64..5.0, y in -20.0f64..20.0) {
            let u = l + w;
            let width = u - l;
            let s = winkler_one(l, u, y, 0.5);
            prop_assert!(s >= width);
            prop_assert_eq!(s == width, y >= l && y <= u);
        }

        #[test]
        fn crps_collapses_for_equal_series(v in proptest::collection::vec(-50.0f64..50.0, 1..20), shift in -5.0f64..5.0) {
            let y: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let m = prob_metrics(&v, &v, &v, &y, None, false).unwrap();
            let p50 = pinball(0.5, &v, &y).unwrap();
            prop_assert!((m.crps - 2.0 / 3.0 * (3.0 * p50)).abs() < 1e-9);
        }

        #[test]
        fn sorted_crps_ignores_series_order(rows in proptest::collection::vec((-9.0f64..9.0, -9.0f64..9.0, -9.0f64..9.0, -9.0f64..9.0), 1..20)) {
            let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let c: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let y: Vec<f64> = rows.iter().map(|r| r.3).collect();
            let m1 = prob_metrics(&a, &b, &c, &y, None, true).unwrap();
            let m2 = prob_metrics(&c, &a, &b, &y, None, true).unwrap();
            prop_assert!((m1.crps - m2.crps).abs() < 1e-12);
            prop_assert!(m1.winkler >= 0.0 && m1.crps >= 0.0);
        }
    }
}
