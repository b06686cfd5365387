//! Mini-batch training with dynamic historical/synthetic composition.
//!
//! Each iteration first raises the historical share `eta` by
//! `(eta_max - eta_min) / T` (capped at `eta_max`), then draws
//! `m1 = floor(m * eta)` historical and `m - m1` synthetic samples, and
//! takes one Adam step on the batch-mean loss.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, MiniBatch, Sample};
use crate::diagnostics::gradient_noise_with;
use crate::neural::{init_params, AdamConfig, AdamState, LossKind, Mode, Network, NetworkParams, NetworkSpec, NeuralError};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty {0} pool for a nonzero batch quota")]
    EmptyPool(&'static str),
    #[error("loss became non-finite at iteration {iter}")]
    NonFiniteLoss { iter: usize },
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainingError>;

/// How mini-batches are composed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Historical share follows the `eta` schedule.
    #[default]
    Dynamic,
    /// Uniform draws over the whole dataset regardless of origin.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub step_size: f64,
    pub iterations: usize,
    /// `None` uses the uniform-sampling share `floor(m n / N) / m`.
    pub eta_min: Option<f64>,
    pub eta_max: f64,
    /// Number of updates to go from `eta_min` to `eta_max`.
    pub horizon: usize,
    pub loss: LossKind,
    pub adam: AdamConfig,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            step_size: 1e-3,
            iterations: 4000,
            eta_min: Some(0.5),
            eta_max: 0.95,
            horizon: 600,
            loss: LossKind::Mse,
            adam: AdamConfig::default(),
            sampling: Sampling::Dynamic,
            seed: 0,
        }
    }
}

/// Above this the schedule leaves little room for synthetic data; it is
/// allowed but reported by [`TrainConfig::warnings`].
pub const RECOMMENDED_ETA_MAX: f64 = 0.9;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainingError::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.iterations == 0 || self.horizon == 0 {
            return bad("batch size, iterations and T must be >= 1");
        }
        if !(self.step_size > 0.0) {
            return bad("step size must be > 0");
        }
        let lo = self.eta_min.unwrap_or(0.0);
        if !(0.0 <= lo && lo <= self.eta_max && self.eta_max <= 1.0) {
            return bad("need 0 <= eta_min <= eta_max <= 1");
        }
        if let LossKind::Pinball { q } = self.loss {
            if !(q > 0.0 && q < 1.0) {
                return bad("pinball level must lie in (0, 1)");
            }
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.eta_max > RECOMMENDED_ETA_MAX {
            w.push(format!(
                "eta_max = {} exceeds the recommended {RECOMMENDED_ETA_MAX}",
                self.eta_max
            ));
        }
        w
    }

    /// `eta_min`, or `floor(m n / N) / m` when unset.
    pub fn resolved_eta_min(&self, data: &Dataset) -> f64 {
        self.eta_min.unwrap_or_else(|| {
            let m = self.batch_size;
            if data.is_empty() {
                return 1.0;
            }
            ((m * data.n_historical()) / data.len()) as f64 / m as f64
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub eta: f64,
    pub updates_applied: usize,
}

impl SamplerState {
    pub fn new(eta_min: f64) -> Self {
        Self {
            eta: eta_min,
            updates_applied: 0,
        }
    }
}

/// One schedule step: `eta <- min(eta + (eta_max - eta_min)/T, eta_max)`.
pub fn eta_update(state: SamplerState, eta_min: f64, eta_max: f64, horizon: usize) -> SamplerState {
    SamplerState {
        eta: (state.eta + (eta_max - eta_min) / horizon as f64).min(eta_max),
        updates_applied: state.updates_applied + 1,
    }
}

/// `floor(m * eta)`, with a 1e-9 guard so that accumulated rounding in
/// `eta` cannot drop an exact integer product by one.
pub fn historical_quota(m: usize, eta: f64) -> usize {
    ((m as f64 * eta + 1e-9).floor() as usize).min(m)
}

fn draw_from(pool: &[Sample], k: usize, rng: &mut dyn RngCore, out: &mut Vec<Sample>) {
    if k <= pool.len() {
        out.extend(sample(rng, pool.len(), k).iter().map(|i| pool[i].clone()));
    } else {
        out.extend((0..k).map(|_| pool[rng.gen_range(0..pool.len())].clone()));
    }
}

/// Dynamic-composition batch. Without replacement inside each pool unless
/// the quota exceeds the pool size.
pub fn draw_minibatch(d: &Dataset, eta: f64, m: usize, rng: &mut dyn RngCore) -> Result<MiniBatch> {
    let m1 = historical_quota(m, eta);
    let m2 = m - m1;
    if m1 > 0 && d.historical().is_empty() {
        return Err(TrainingError::EmptyPool("historical"));
    }
    if m2 > 0 && d.synthetic().is_empty() {
        return Err(TrainingError::EmptyPool("synthetic"));
    }
    let mut samples = Vec::with_capacity(m);
    draw_from(d.historical(), m1, rng, &mut samples);
    draw_from(d.synthetic(), m2, rng, &mut samples);
    Ok(MiniBatch { samples, m1, m2 })
}

/// Uniform batch over all of `d`.
pub fn draw_uniform(d: &Dataset, m: usize, rng: &mut dyn RngCore) -> Result<MiniBatch> {
    if d.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mut samples = Vec::with_capacity(m);
    draw_from(d.samples(), m, rng, &mut samples);
    Ok(MiniBatch::new(samples))
}

/// Optional measurements taken during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticFlags {
    /// Record the gradient-noise norm and the full-data loss every this
    /// many iterations (dropout off, parameters before the update).
    pub every: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Batch loss `J_m` per iteration.
    pub loss: Vec<f64>,
    pub eta: Vec<f64>,
    pub m1: Vec<usize>,
    pub grad_noise: Vec<Option<f64>>,
    /// Full-dataset loss `J_N` at the diagnostic iterations.
    pub full_loss: Vec<Option<f64>>,
    pub params: NetworkParams,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loss.is_empty()
    }

    /// Mean gradient-noise norm over the recorded iterations.
    pub fn mean_grad_noise(&self) -> Option<f64> {
        let v: Vec<f64> = self.grad_noise.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// CSV with header `iter,loss,eta,grad_noise_norm,full_loss`; missing
    /// measurements are empty cells.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "iter,loss,eta,grad_noise_norm,full_loss")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for i in 0..self.len() {
            writeln!(
                f,
                "{},{:e},{},{},{}",
                i + 1,
                self.loss[i],
                self.eta[i],
                opt(self.grad_noise[i]),
                opt(self.full_loss[i])
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Trains from a seeded initialization. Data is used as given (normalize
/// beforehand if desired).
pub fn train(spec: &NetworkSpec, data: &Dataset, cfg: &TrainConfig, flags: DiagnosticFlags) -> Result<TrainTrace> {
    let init = init_params(spec, cfg.seed)?;
    train_from(spec, init, data, cfg, flags)
}

pub fn train_from(
    spec: &NetworkSpec,
    mut params: NetworkParams,
    data: &Dataset,
    cfg: &TrainConfig,
    flags: DiagnosticFlags,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let net = Network::new(spec)?;
    if params.dim() != net.param_dim() {
        return Err(NeuralError::DimensionMismatch {
            expected: net.param_dim(),
            found: params.dim(),
        }
        .into());
    }
    let eval_net = Network::new(&spec.without_dropout())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let eta_min = cfg.resolved_eta_min(data);
    let dynamic = cfg.sampling == Sampling::Dynamic && data.n_synthetic() > 0;
    let mut sampler = SamplerState::new(eta_min);
    let mut adam = AdamState::new(params.dim(), cfg.adam);
    let n = cfg.iterations;
    let mut trace = TrainTrace {
        loss: Vec::with_capacity(n),
        eta: Vec::with_capacity(n),
        m1: Vec::with_capacity(n),
        grad_noise: Vec::with_capacity(n),
        full_loss: Vec::with_capacity(n),
        params: NetworkParams::zeros(0),
    };
    for iter in 1..=n {
        let batch = if dynamic {
            sampler = eta_update(sampler, eta_min, cfg.eta_max, cfg.horizon);
            draw_minibatch(data, sampler.eta, cfg.batch_size, &mut rng)?
        } else {
            draw_uniform(data, cfg.batch_size, &mut rng)?
        };
        let record = flags.every.is_some_and(|k| k > 0 && (iter % k == 0 || iter == 1));
        if record {
            let gn = gradient_noise_with(&eval_net, &params, &batch.samples, data.samples(), cfg.loss)?;
            trace.grad_noise.push(Some(gn.norm));
            trace.full_loss.push(Some(gn.full_loss));
        } else {
            trace.grad_noise.push(None);
            trace.full_loss.push(None);
        }
        let (loss, grad) = net.loss_and_grad(&params, &batch.samples, cfg.loss, Mode::Train(&mut rng))?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainingError::NonFiniteLoss { iter });
        }
        adam.apply(&mut params.theta, &grad, cfg.step_size)?;
        trace.loss.push(loss);
        trace.eta.push(if dynamic { sampler.eta } else { batch.m1 as f64 / batch.len() as f64 });
        trace.m1.push(batch.m1);
    }
    trace.params = params;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Activation;
    use crate::Origin;

    fn hybrid(n_h: usize, n_s: usize) -> Dataset {
        let mut rows: Vec<Sample> = (0..n_h)
            .map(|i| Sample::historical(vec![i as f64 / n_h as f64], vec![1.0]))
            .collect();
        rows.extend((0..n_s).map(|i| Sample::synthetic(vec![i as f64 / n_s as f64], vec![2.0])));
        Dataset::from_samples(rows).unwrap()
    }

    #[test]
    fn eta_examples() {
        let s = eta_update(SamplerState::new(0.5), 0.5, 0.95, 600);
        assert!((s.eta - 0.50075).abs() < 1e-15);
        let mut s = SamplerState::new(0.5);
        for _ in 0..600 {
            s = eta_update(s, 0.5, 0.95, 600);
        }
        assert!((s.eta - 0.95).abs() < 1e-9);
        let s = eta_update(SamplerState::new(0.95), 0.5, 0.95, 600);
        assert_eq!(s.eta, 0.95);
    }

    #[test]
    fn batch_composition() {
        let d = hybrid(40, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = draw_minibatch(&d, 0.6, 20, &mut rng).unwrap();
        assert_eq!((b.m1, b.m2), (12, 8));
        assert_eq!(b.samples.iter().filter(|s| s.origin == Origin::Historical).count(), 12);
        let b = draw_minibatch(&d, 0.95, 32, &mut rng).unwrap();
        assert_eq!((b.m1, b.m2), (30, 2));
        let b = draw_minibatch(&d, 1.0, 10, &mut rng).unwrap();
        assert_eq!((b.m1, b.m2), (10, 0));
        // small pool falls back to replacement
        let d = hybrid(3, 40);
        let b = draw_minibatch(&d, 0.5, 20, &mut rng).unwrap();
        assert_eq!(b.m1, 10);
        let only_h = hybrid(5, 0);
        assert!(matches!(
            draw_minibatch(&only_h, 0.5, 4, &mut rng),
            Err(TrainingError::EmptyPool("synthetic"))
        ));
    }

    #[test]
    fn default_eta_min_is_uniform_share() {
        let cfg = TrainConfig {
            eta_min: None,
            ..Default::default()
        };
        // floor(32 * 546 / 2046) / 32 = 8 / 32
        let d = hybrid(546, 1500);
        assert_eq!(cfg.resolved_eta_min(&d), 0.25);
        assert_eq!(TrainConfig::default().warnings().len(), 1);
    }

    #[test]
    fn trace_schedule_and_determinism() {
        let d = hybrid(30, 60);
        let spec = NetworkSpec::mlp(&[1, 4, 1], Activation::Tanh, None, LossKind::Mse);
        let cfg = TrainConfig {
            iterations: 700,
            batch_size: 8,
            seed: 3,
            ..Default::default()
        };
        let t = train(&spec, &d, &cfg, DiagnosticFlags { every: Some(100) }).unwrap();
        assert_eq!(t.len(), 700);
        assert!(t.eta.windows(2).all(|w| w[1] >= w[0]));
        assert!((t.eta[599] - 0.95).abs() < 1e-9);
        for (e, m1) in t.eta.iter().zip(&t.m1) {
            assert_eq!(*m1, historical_quota(8, *e));
        }
        assert_eq!(t.grad_noise.iter().flatten().count(), 8);
        let t2 = train(&spec, &d, &cfg, DiagnosticFlags { every: Some(100) }).unwrap();
        assert_eq!(t.params, t2.params);
    }

    #[test]
    fn fits_noiseless_linear_data() {
        let rows = (0..64)
            .map(|i| {
                let x = i as f64 / 32.0 - 1.0;
                Sample::historical(vec![x, 0.5 * x], vec![0.8 * x - 0.3])
            })
            .collect();
        let d = Dataset::from_samples(rows).unwrap();
        let spec = NetworkSpec::mlp(&[2, 8, 1], Activation::Tanh, None, LossKind::Mse);
        let cfg = TrainConfig {
            step_size: 1e-2,
            seed: 1,
            ..Default::default()
        };
        let t = train(&spec, &d, &cfg, DiagnosticFlags::default()).unwrap();
        let net = Network::new(&spec).unwrap();
        assert!(net.mean_loss(&t.params, d.samples(), LossKind::Mse).unwrap() < 1e-3);
    }

    #[test]
    fn trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let t = TrainTrace {
            loss: vec![1.0, 0.5],
            eta: vec![0.5, 0.6],
            m1: vec![1, 1],
            grad_noise: vec![Some(2.0), None],
            full_loss: vec![Some(1.5), None],
            params: NetworkParams::zeros(1),
        };
        let p = dir.path().join("trace.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iter,loss,eta,grad_noise_norm,full_loss");
        assert!(lines[2].ends_with(",,"));
    }
}
