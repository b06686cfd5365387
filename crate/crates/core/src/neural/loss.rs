use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::NeuralError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    /// Quantile loss at level `q`.
    Pinball { q: f64 },
}

impl LossKind {
    /// Loss of a single scalar residual `pred - y`.
    #[inline]
    pub fn point(self, pred: f64, y: f64) -> f64 {
        match self {
            LossKind::Mse => (pred - y) * (pred - y),
            LossKind::Pinball { q } => {
                let r = y - pred;
                if r > 0.0 {
                    q * r
                } else {
                    (q - 1.0) * r
                }
            }
        }
    }

    /// d(point)/d(pred). At a zero pinball residual the `-q` branch is used.
    #[inline]
    pub fn point_grad(self, pred: f64, y: f64) -> f64 {
        match self {
            LossKind::Mse => 2.0 * (pred - y),
            LossKind::Pinball { q } => {
                if pred > y {
                    1.0 - q
                } else {
                    -q
                }
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Mse => write!(f, "mse"),
            LossKind::Pinball { q } => write!(f, "pinball:{q}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = String;

    /// Parses `mse` or `pinball:Q`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mse" {
            return Ok(LossKind::Mse);
        }
        if let Some(q) = s.strip_prefix("pinball:") {
            let q: f64 = q.parse().map_err(|_| format!("bad quantile in `{s}`"))?;
            if q > 0.0 && q < 1.0 {
                return Ok(LossKind::Pinball { q });
            }
            return Err(format!("quantile {q} outside (0, 1)"));
        }
        Err(format!("unknown loss `{s}` (expected mse or pinball:Q)"))
    }
}

/// Mean loss over every scalar component of every prediction.
pub fn loss(kind: LossKind, preds: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<f64, NeuralError> {
    if preds.len() != ys.len() {
        return Err(NeuralError::DimensionMismatch {
            expected: ys.len(),
            found: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(NeuralError::EmptyInput);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, y) in preds.iter().zip(ys) {
        if p.len() != y.len() {
            return Err(NeuralError::DimensionMismatch {
                expected: y.len(),
                found: p.len(),
            });
        }
        total += p.iter().zip(y).map(|(&a, &b)| kind.point(a, b)).sum::<f64>();
        count += p.len();
    }
    if count == 0 {
        return Err(NeuralError::EmptyInput);
    }
    Ok(total / count as f64)
}

/// Gradient of `scale * sum_j point(pred_j, y_j)` with respect to `pred`.
pub fn loss_grad(kind: LossKind, pred: &[f64], y: &[f64], scale: f64) -> Vec<f64> {
    pred.iter()
        .zip(y)
        .map(|(&p, &t)| scale * kind.point_grad(p, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_residuals() {
        let p = vec![vec![1.0, 2.0], vec![3.0, -4.0]];
        assert_eq!(loss(LossKind::Mse, &p, &p).unwrap(), 0.0);
        assert_eq!(loss(LossKind::Pinball { q: 0.3 }, &p, &p).unwrap(), 0.0);
    }

    #[test]
    fn pinball_hand_value() {
        let v = loss(LossKind::Pinball { q: 0.75 }, &[vec![8.0]], &[vec![10.0]]).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
        let v = loss(LossKind::Pinball { q: 0.75 }, &[vec![12.0]], &[vec![10.0]]).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn median_pinball_is_half_mae() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let preds: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-5.0..5.0)]).collect();
        let ys: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-5.0..5.0)]).collect();
        let mae = preds.iter().zip(&ys).map(|(p, y)| (p[0] - y[0]).abs()).sum::<f64>() / 200.0;
        let pin = loss(LossKind::Pinball { q: 0.5 }, &preds, &ys).unwrap();
        assert!((pin - 0.5 * mae).abs() < 1e-12);
    }

    #[test]
    fn mse_nonnegative_and_zero_iff_equal() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
            let mut y = p.clone();
            assert_eq!(loss(LossKind::Mse, &p, &y).unwrap(), 0.0);
            y[rng.gen_range(0..5)][0] += 1e-3;
            assert!(loss(LossKind::Mse, &p, &y).unwrap() > 0.0);
        }
    }

    #[test]
    fn errors() {
        assert!(matches!(loss(LossKind::Mse, &[], &[]), Err(NeuralError::EmptyInput)));
        assert!(matches!(
            loss(LossKind::Mse, &[vec![1.0]], &[]),
            Err(NeuralError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn parse_loss() {
        assert_eq!("mse".parse::<LossKind>().unwrap(), LossKind::Mse);
        assert_eq!("pinball:0.25".parse::<LossKind>().unwrap(), LossKind::Pinball { q: 0.25 });
        assert!("pinball:1.5".parse::<LossKind>().is_err());
        assert!("mae".parse::<LossKind>().is_err());
    }
}
