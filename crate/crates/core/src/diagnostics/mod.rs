//! Point and probabilistic metrics, gradient noise, manifold-error
//! decomposition, and a PCA projection of the loss landscape.

mod landscape;
mod metrics;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, MiniBatch, Normalization, Sample};
use crate::neural::{LossKind, Network, NetworkParams, NetworkSpec, NeuralError};

pub use landscape::{landscape_projection, power_iteration, Landscape, LandscapeCell, PrincipalAxis};
pub use metrics::{
    crpss, percentile, pinball, point_metrics, prob_metrics, winkler_one, PointMetrics, ProbMetrics, QUANTILES,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("every target is below the MAPE threshold")]
    AllTargetsBelowThreshold,
    #[error("skill score requested without a baseline CRPS")]
    MissingBaseline,
    #[error("no ground-truth oracle is available for this data")]
    OracleUnavailable,
    #[error("zero-variance data cannot be projected")]
    DegenerateCovariance,
    #[error("oracle sample has {found} rows, need at least {needed}")]
    InsufficientOracle { needed: usize, found: usize },
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

type Result<T> = std::result::Result<T, DiagnosticsError>;

/// A trained network together with the normalization it was trained under,
/// predicting in original units.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    net: Network,
    pub params: NetworkParams,
    pub normalization: Option<Normalization>,
}

impl TrainedModel {
    /// Dropout layers are dropped; evaluation never uses them.
    pub fn new(spec: &NetworkSpec, params: NetworkParams, normalization: Option<Normalization>) -> Result<Self> {
        let net = Network::new(&spec.without_dropout())?;
        if params.dim() != net.param_dim() {
            return Err(NeuralError::DimensionMismatch {
                expected: net.param_dim(),
                found: params.dim(),
            }
            .into());
        }
        Ok(Self {
            net,
            params,
            normalization,
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(match &self.normalization {
            Some(n) => n.denormalize_target(&self.net.predict(&self.params, &n.features(x))?),
            None => self.net.predict(&self.params, x)?,
        })
    }

    /// Flattened predictions and targets over a dataset.
    pub fn predict_flat(&self, data: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut p = Vec::with_capacity(data.len() * data.target_dim());
        let mut y = Vec::with_capacity(p.capacity());
        for s in data.samples() {
            p.extend(self.predict(&s.features)?);
            y.extend_from_slice(&s.target);
        }
        Ok((p, y))
    }

    /// Mean loss in original units.
    pub fn loss(&self, data: &Dataset, kind: LossKind) -> Result<f64> {
        let (p, y) = self.predict_flat(data)?;
        if p.is_empty() {
            return Err(DiagnosticsError::EmptyInput);
        }
        Ok(p.iter().zip(&y).map(|(a, b)| kind.point(*a, *b)).sum::<f64>() / p.len() as f64)
    }
}

/// Field names follow the report schema; probabilistic fields are absent
/// for point forecasts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: Option<f64>,
    pub mape: Option<f64>,
    pub mape_unguarded: Option<f64>,
    pub smape: Option<f64>,
    pub pinball: Option<[f64; 3]>,
    pub winkler: Option<f64>,
    pub crps: Option<f64>,
    pub crpss: Option<f64>,
    pub train_loss: f64,
    pub test_loss: f64,
    pub overfit_gap: f64,
}

impl MetricsReport {
    pub fn with_point(mut self, m: &PointMetrics) -> Self {
        self.rmse = Some(m.rmse);
        self.mape = Some(m.mape);
        self.mape_unguarded = m.mape_unguarded;
        self.smape = Some(m.smape);
        self
    }

    pub fn with_prob(mut self, m: &ProbMetrics) -> Self {
        self.pinball = Some(m.pinball);
        self.winkler = Some(m.winkler);
        self.crps = Some(m.crps);
        self.crpss = m.crpss;
        self
    }
}

/// Test-minus-train loss.
pub fn overfit_gap(train_loss: f64, test_loss: f64) -> f64 {
    test_loss - train_loss
}

/// Point-forecast report: metrics on `test`, losses on both sets.
pub fn evaluate_point(model: &TrainedModel, train: &Dataset, test: &Dataset, kind: LossKind) -> Result<MetricsReport> {
    let (p, y) = model.predict_flat(test)?;
    let pm = point_metrics(&p, &y, None)?;
    let train_loss = model.loss(train, kind)?;
    let test_loss = model.loss(test, kind)?;
    Ok(MetricsReport {
        train_loss,
        test_loss,
        overfit_gap: overfit_gap(train_loss, test_loss),
        ..Default::default()
    }
    .with_point(&pm))
}

/// Quantile-forecast report from the 0.25/0.5/0.75 models; the losses are
/// pinball losses averaged over the three levels and the point metrics use
/// the median model.
pub fn evaluate_quantiles(
    models: [&TrainedModel; 3],
    train: &Dataset,
    test: &Dataset,
    baseline_crps: Option<f64>,
) -> Result<MetricsReport> {
    let mut series = Vec::with_capacity(3);
    let mut ys = Vec::new();
    let (mut train_loss, mut test_loss) = (0.0, 0.0);
    for (m, q) in models.iter().zip(QUANTILES) {
        let (p, y) = m.predict_flat(test)?;
        series.push(p);
        ys = y;
        train_loss += m.loss(train, LossKind::Pinball { q })? / 3.0;
        test_loss += m.loss(test, LossKind::Pinball { q })? / 3.0;
    }
    let pm = prob_metrics(&series[0], &series[1], &series[2], &ys, baseline_crps, false)?;
    let point = point_metrics(&series[1], &ys, None)?;
    Ok(MetricsReport {
        train_loss,
        test_loss,
        overfit_gap: overfit_gap(train_loss, test_loss),
        ..Default::default()
    }
    .with_point(&point)
    .with_prob(&pm))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientNoise {
    /// `grad J_m - grad J_N`.
    pub vector: Vec<f64>,
    pub norm: f64,
    pub batch_loss: f64,
    pub full_loss: f64,
}

/// Gradient noise at `params` with dropout disabled.
pub fn gradient_noise(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &MiniBatch,
    full: &Dataset,
    kind: LossKind,
) -> Result<GradientNoise> {
    let net = Network::new(&spec.without_dropout())?;
    Ok(gradient_noise_with(&net, params, &batch.samples, full.samples(), kind)?)
}

/// As [`gradient_noise`] for a prepared dropout-free network.
pub fn gradient_noise_with(
    net: &Network,
    params: &NetworkParams,
    batch: &[Sample],
    full: &[Sample],
    kind: LossKind,
) -> std::result::Result<GradientNoise, NeuralError> {
    use crate::neural::Mode;
    let (batch_loss, gb) = net.loss_and_grad(params, batch, kind, Mode::Eval)?;
    let (full_loss, gf) = net.loss_and_grad(params, full, kind, Mode::Eval)?;
    let vector: Vec<f64> = gb.iter().zip(&gf).map(|(a, b)| a - b).collect();
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(GradientNoise {
        vector,
        norm,
        batch_loss,
        full_loss,
    })
}

type TruthFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Ground truth for simulated tasks: an optional noise-free response and a
/// large reference sample from the data distribution.
#[derive(Clone)]
pub struct GroundTruthOracle {
    truth: Option<Arc<TruthFn>>,
    pub reference: Dataset,
}

impl std::fmt::Debug for GroundTruthOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroundTruthOracle")
            .field("pointwise", &self.truth.is_some())
            .field("reference_len", &self.reference.len())
            .finish()
    }
}

impl GroundTruthOracle {
    pub fn new(truth: Option<Arc<TruthFn>>, reference: Dataset) -> Self {
        Self { truth, reference }
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }

    pub fn truth(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.truth.as_ref().map(|f| f(x)).ok_or(DiagnosticsError::OracleUnavailable)
    }
}

/// Per-site split `(f - y_syn) = (f - y_real) - (y_syn - y_real)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSite {
    pub pred_minus_syn: Vec<f64>,
    pub pred_minus_real: Vec<f64>,
    pub syn_minus_real: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldReport {
    pub sites: Vec<ManifoldSite>,
    pub mean_abs_pred_minus_syn: f64,
    pub mean_abs_pred_minus_real: f64,
    pub mean_abs_syn_minus_real: f64,
}

pub fn manifold_errors(
    model: &TrainedModel,
    sd: &Dataset,
    oracle: Option<&GroundTruthOracle>,
) -> Result<ManifoldReport> {
    let oracle = oracle.ok_or(DiagnosticsError::OracleUnavailable)?;
    if sd.synthetic().is_empty() {
        return Err(DiagnosticsError::EmptyInput);
    }
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    let mut sites = Vec::with_capacity(sd.n_synthetic());
    let (mut a, mut b, mut c, mut k) = (0.0, 0.0, 0.0, 0usize);
    for s in sd.synthetic() {
        let f = model.predict(&s.features)?;
        let real = oracle.truth(&s.features)?;
        let site = ManifoldSite {
            pred_minus_syn: diff(&f, &s.target),
            pred_minus_real: diff(&f, &real),
            syn_minus_real: diff(&s.target, &real),
        };
        a += site.pred_minus_syn.iter().map(|v| v.abs()).sum::<f64>();
        b += site.pred_minus_real.iter().map(|v| v.abs()).sum::<f64>();
        c += site.syn_minus_real.iter().map(|v| v.abs()).sum::<f64>();
        k += f.len();
        sites.push(site);
    }
    let k = k as f64;
    Ok(ManifoldReport {
        sites,
        mean_abs_pred_minus_syn: a / k,
        mean_abs_pred_minus_real: b / k,
        mean_abs_syn_minus_real: c / k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{init_params, Activation};
    use crate::training::draw_uniform;
    use rand::SeedableRng;

    fn data(n: usize) -> Dataset {
        Dataset::from_samples(
            (0..n)
                .map(|i| {
                    let x = i as f64 / n as f64;
                    Sample::historical(vec![x, 1.0 - x * x], vec![x.sin(), 0.3 * x])
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn full_batch_has_no_noise_and_partitions_cancel() {
        let spec = NetworkSpec::mlp(&[2, 5, 2], Activation::Tanh, Some(0.3), LossKind::Mse);
        let params = init_params(&spec, 4).unwrap();
        let d = data(24);
        let full = MiniBatch::new(d.samples().to_vec());
        let gn = gradient_noise(&spec, &params, &full, &d, LossKind::Mse).unwrap();
        assert!(gn.norm < 1e-14);
        // size-weighted mean over a disjoint cover
        let mut acc = vec![0.0; params.dim()];
        for chunk in d.samples().chunks(5) {
            let b = MiniBatch::new(chunk.to_vec());
            let g = gradient_noise(&spec, &params, &b, &d, LossKind::Mse).unwrap();
            for (a, v) in acc.iter_mut().zip(&g.vector) {
                *a += v * chunk.len() as f64 / d.len() as f64;
            }
        }
        assert!(acc.iter().all(|v| v.abs() < 1e-10));
        // deterministic with dropout in the spec
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let b = draw_uniform(&d, 6, &mut rng).unwrap();
        let g1 = gradient_noise(&spec, &params, &b, &d, LossKind::Mse).unwrap();
        let g2 = gradient_noise(&spec, &params, &b, &d, LossKind::Mse).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn manifold_identity() {
        let spec = NetworkSpec::mlp(&[2, 3, 2], Activation::Relu, None, LossKind::Mse);
        let model = TrainedModel::new(&spec, init_params(&spec, 1).unwrap(), None).unwrap();
        let rows: Vec<Sample> = (0..10)
            .map(|i| Sample::synthetic(vec![i as f64, 2.0], vec![1.0 + i as f64, -3.0]))
            .collect();
        let sd = Dataset::from_samples(rows).unwrap();
        let truth: Arc<TruthFn> = Arc::new(|x: &[f64]| vec![x[0] + 1.0, x[1] * 0.5]);
        let oracle = GroundTruthOracle::new(Some(truth), sd.clone());
        let rep = manifold_errors(&model, &sd, Some(&oracle)).unwrap();
        for s in &rep.sites {
            for k in 0..2 {
                let lhs = s.pred_minus_syn[k];
                let rhs = s.pred_minus_real[k] - s.syn_minus_real[k];
                assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            }
            // first target matches truth, so the first two components agree
            assert_eq!(s.syn_minus_real[0], 0.0);
            assert_eq!(s.pred_minus_syn[0], s.pred_minus_real[0]);
        }
        // f = y_real: first component is minus the third
        let exact: Arc<TruthFn> = {
            let m = model.clone();
            Arc::new(move |x: &[f64]| m.predict(x).unwrap())
        };
        let oracle = GroundTruthOracle::new(Some(exact), sd.clone());
        for s in manifold_errors(&model, &sd, Some(&oracle)).unwrap().sites {
            assert_eq!(s.pred_minus_real, vec![0.0, 0.0]);
            for k in 0..2 {
                assert_eq!(s.pred_minus_syn[k], -s.syn_minus_real[k]);
            }
        }
        let none = GroundTruthOracle::new(None, sd.clone());
        assert!(matches!(
            manifold_errors(&model, &sd, Some(&none)),
            Err(DiagnosticsError::OracleUnavailable)
        ));
        assert!(matches!(
            manifold_errors(&model, &sd, None),
            Err(DiagnosticsError::OracleUnavailable)
        ));
    }

    #[test]
    fn report_field_names() {
        let r = MetricsReport::default();
        let v = serde_json::to_value(&r).unwrap();
        for k in [
            "rmse",
            "mape",
            "smape",
            "pinball",
            "winkler",
            "crps",
            "crpss",
            "train_loss",
            "test_loss",
            "overfit_gap",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
