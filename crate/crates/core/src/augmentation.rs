//! Knowledge-based synthetic data: accuracy filter and inverse-error weights
//! over calibrated models, site selection biased toward sparsely observed
//! regions, and the two baseline augmenters (record averaging and
//! multiplicative jitter).

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classical::{predict, CalibratedModel, CalibrationError};
use crate::dataset::{Dataset, DatasetError, Sample};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("no model reaches the accuracy requirement e* < {beta}")]
    AllModelsFiltered { beta: f64 },
    #[error("need at least {needed} historical samples, found {found}")]
    DatasetTooSmall { needed: usize, found: usize },
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("{models} models but {weights} weights")]
    WeightMismatch { models: usize, weights: usize },
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub gamma: Vec<f64>,
    pub eligible: Vec<bool>,
}

/// `gamma_k ∝ 1/(e_k + alpha)` over models with `e_k < beta`, zero
/// elsewhere. With `alpha = 0` any zero-error model takes all the weight,
/// shared evenly among such models.
pub fn compute_weights(errors: &[f64], cfg: &AggregationConfig) -> Result<EnsembleWeights> {
    if !(cfg.alpha >= 0.0) || !(cfg.beta > 0.0) {
        return Err(AugmentError::InvalidConfig("need alpha >= 0 and beta > 0".into()));
    }
    if errors.is_empty() || errors.iter().any(|e| !(*e >= 0.0)) {
        return Err(AugmentError::InvalidConfig("errors must be a nonempty list of values >= 0".into()));
    }
    let eligible: Vec<bool> = errors.iter().map(|&e| e < cfg.beta).collect();
    if !eligible.contains(&true) {
        return Err(AugmentError::AllModelsFiltered { beta: cfg.beta });
    }
    let zero_hits = errors
        .iter()
        .zip(&eligible)
        .filter(|(e, ok)| **ok && **e + cfg.alpha == 0.0)
        .count();
    let raw: Vec<f64> = errors
        .iter()
        .zip(&eligible)
        .map(|(&e, &ok)| match (ok, zero_hits > 0) {
            (false, _) => 0.0,
            (true, true) => f64::from(u8::from(e + cfg.alpha == 0.0)),
            (true, false) => 1.0 / (e + cfg.alpha),
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(EnsembleWeights {
        gamma: raw.iter().map(|v| v / total).collect(),
        eligible,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteGenConfig {
    pub count: usize,
    /// Box padding as a fraction of each feature's historical range.
    pub margin: f64,
    /// Share of sites drawn from sparsely populated deciles.
    pub sparse_bias: f64,
    pub seed: u64,
}

impl SiteGenConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        Self {
            count,
            margin: 0.05,
            sparse_bias: 0.5,
            seed,
        }
    }
}

const DECILES: usize = 10;

/// Per-feature historical range and decile counts.
#[derive(Clone, Debug)]
pub struct FeatureHistogram {
    pub min: f64,
    pub max: f64,
    pub counts: [usize; DECILES],
}

impl FeatureHistogram {
    pub fn bin(&self, v: f64) -> Option<usize> {
        if v < self.min || v > self.max {
            return None;
        }
        let w = self.max - self.min;
        if w <= 0.0 {
            return Some(0);
        }
        Some((((v - self.min) / w) * DECILES as f64).floor().min((DECILES - 1) as f64) as usize)
    }

    fn bin_range(&self, b: usize) -> (f64, f64) {
        let w = (self.max - self.min) / DECILES as f64;
        (self.min + b as f64 * w, self.min + (b + 1) as f64 * w)
    }
}

pub fn feature_histograms(hd: &Dataset) -> Vec<FeatureHistogram> {
    let rows = hd.historical();
    (0..hd.feature_dim())
        .map(|j| {
            let (min, max) = rows
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| {
                    (a.min(s.features[j]), b.max(s.features[j]))
                });
            let mut h = FeatureHistogram {
                min,
                max,
                counts: [0; DECILES],
            };
            for s in rows {
                let b = h.bin(s.features[j]).unwrap();
                h.counts[b] += 1;
            }
            h
        })
        .collect()
}

/// New feature vectors inside the padded historical box. A `sparse_bias`
/// share picks, per feature, a decile with probability proportional to
/// `1/(count+1)`; the rest is a Latin hypercube over the padded box.
pub fn generate_sites(hd: &Dataset, cfg: &SiteGenConfig) -> Result<Vec<Vec<f64>>> {
    if hd.historical().is_empty() {
        return Err(AugmentError::DatasetTooSmall { needed: 1, found: 0 });
    }
    if cfg.count == 0 || !(cfg.margin >= 0.0) || !(0.0..=1.0).contains(&cfg.sparse_bias) {
        return Err(AugmentError::InvalidConfig(
            "need count >= 1, margin >= 0 and sparse_bias in [0, 1]".into(),
        ));
    }
    let hist = feature_histograms(hd);
    let d = hist.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_sparse = (cfg.sparse_bias * cfg.count as f64).round() as usize;
    let n_lhs = cfg.count - n_sparse;
    let mut sites = Vec::with_capacity(cfg.count);
    for _ in 0..n_sparse {
        let x = hist
            .iter()
            .map(|h| {
                let w: Vec<f64> = h.counts.iter().map(|&c| 1.0 / (c as f64 + 1.0)).collect();
                let total: f64 = w.iter().sum();
                let mut r = rng.gen::<f64>() * total;
                let mut b = DECILES - 1;
                for (k, wk) in w.iter().enumerate() {
                    if r < *wk {
                        b = k;
                        break;
                    }
                    r -= wk;
                }
                let (lo, hi) = h.bin_range(b);
                lo + rng.gen::<f64>() * (hi - lo)
            })
            .collect();
        sites.push(x);
    }
    if n_lhs > 0 {
        let strata: Vec<Vec<usize>> = (0..d)
            .map(|_| {
                let mut p: Vec<usize> = (0..n_lhs).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        for i in 0..n_lhs {
            let x = hist
                .iter()
                .enumerate()
                .map(|(j, h)| {
                    let pad = cfg.margin * (h.max - h.min);
                    let (lo, hi) = (h.min - pad, h.max + pad);
                    let u = (strata[j][i] as f64 + rng.gen::<f64>()) / n_lhs as f64;
                    lo + u * (hi - lo)
                })
                .collect();
            sites.push(x);
        }
    }
    Ok(sites)
}

/// Targets are the weighted ensemble prediction at each site.
pub fn synthesize(models: &[CalibratedModel], weights: &EnsembleWeights, sites: &[Vec<f64>]) -> Result<Dataset> {
    if models.len() != weights.gamma.len() {
        return Err(AugmentError::WeightMismatch {
            models: models.len(),
            weights: weights.gamma.len(),
        });
    }
    let active: Vec<(&CalibratedModel, f64)> = models
        .iter()
        .zip(&weights.gamma)
        .filter(|(_, g)| **g > 0.0)
        .map(|(m, g)| (m, *g))
        .collect();
    let Some((first, _)) = active.first() else {
        return Err(AugmentError::AllModelsFiltered { beta: f64::NAN });
    };
    let out = first.output_dim;
    let mut samples = Vec::with_capacity(sites.len());
    for x in sites {
        let mut y = vec![0.0; out];
        for (m, g) in &active {
            let p = predict(m, x)?;
            if p.len() != out {
                return Err(CalibrationError::DimensionMismatch {
                    expected: out,
                    found: p.len(),
                }
                .into());
            }
            for (a, b) in y.iter_mut().zip(&p) {
                *a += g * b;
            }
        }
        samples.push(Sample::synthetic(x.clone(), y));
    }
    Ok(Dataset::from_samples(samples)?)
}

/// Each new sample averages three distinct historical records.
pub fn augment_da1(hd: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let rows = hd.historical();
    if rows.len() < 3 {
        return Err(AugmentError::DatasetTooSmall {
            needed: 3,
            found: rows.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let pick = sample(&mut rng, rows.len(), 3);
            let mean = |f: fn(&Sample) -> &Vec<f64>| -> Vec<f64> {
                let mut acc = vec![0.0; f(&rows[0]).len()];
                for i in pick.iter() {
                    for (a, v) in acc.iter_mut().zip(f(&rows[i])) {
                        *a += v;
                    }
                }
                acc.iter().map(|v| v / 3.0).collect()
            };
            Sample::synthetic(mean(|s| &s.features), mean(|s| &s.target))
        })
        .collect();
    Ok(hd.with_samples(samples)?)
}

/// Each new sample copies a random record and scales every component by an
/// independent factor in `[0.995, 1.005]`.
pub fn augment_da2(hd: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let rows = hd.historical();
    if rows.is_empty() {
        return Err(AugmentError::DatasetTooSmall { needed: 1, found: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count)
        .map(|_| {
            let s = &rows[rng.gen_range(0..rows.len())];
            let mut jitter = |v: &Vec<f64>| -> Vec<f64> { v.iter().map(|x| x * (1.0 + rng.gen_range(-0.005..=0.005))).collect() };
            let f = jitter(&s.features);
            let t = jitter(&s.target);
            Sample::synthetic(f, t)
        })
        .collect();
    Ok(hd.with_samples(samples)?)
}
