//! Seeded market simulators.
//!
//! Case 1 (user modeling): daily 24-hour price vectors and the consumption
//! profile of a price-responsive consumer that spreads a fixed daily energy
//! over the hours by a softmin rule under per-hour bounds.
//!
//! Case 2 (price forecasting): an hourly system with load, temperature,
//! wind, solar, gas-fired output and price; samples are three-hour windows
//! of all six series and the target is the next hour's price.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{HarnessError, Task};
use crate::dataset::{Dataset, Sample};
use crate::diagnostics::GroundTruthOracle;

pub const HOURS: usize = 24;
pub const CASE2_WINDOW: usize = 3;
pub const CASE2_SERIES: [&str; 6] = ["load", "temperature", "wind", "solar", "gas", "price"];

/// Size of the oracle reference sample relative to the training set.
const REFERENCE_FACTOR: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsumerParams {
    /// Softmin temperature in price units; larger is less price-responsive.
    pub tau: f64,
    /// Daily energy, MWh.
    pub energy: f64,
    /// Hourly bounds, MW.
    pub lower: f64,
    pub upper: f64,
    /// Ramp limit, MW/h. Given to the classical model; the simulated
    /// consumer itself is not ramp-limited.
    pub ramp: f64,
    /// Amplitude of the consumer's daily preference curve, price units.
    pub preference: f64,
    /// Per-hour standard deviation of the day-to-day preference drift.
    pub jitter: f64,
}

impl Default for ConsumerParams {
    fn default() -> Self {
        Self {
            tau: 10.0,
            energy: 120.0,
            lower: 1.0,
            upper: 10.0,
            ramp: 6.0,
            preference: 6.0,
            jitter: 2.0,
        }
    }
}

impl ConsumerParams {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let h = HOURS as f64;
        if !(self.tau > 0.0) || !(self.upper > 0.0) || !(self.lower >= 0.0) || self.lower > self.upper {
            return Err(HarnessError::InvalidConsumerParams(
                "need tau > 0 and 0 <= L <= U with U > 0".into(),
            ));
        }
        if self.energy > h * self.upper || self.energy < h * self.lower {
            return Err(HarnessError::InvalidConsumerParams(format!(
                "daily energy {} outside [24 L, 24 U] = [{}, {}]",
                self.energy,
                h * self.lower,
                h * self.upper
            )));
        }
        if !(self.ramp > 0.0) || !(self.jitter >= 0.0) {
            return Err(HarnessError::InvalidConsumerParams("need R > 0 and jitter >= 0".into()));
        }
        Ok(())
    }

    /// Nominal preference for each hour: evening-heavy with a midday dip.
    pub fn preference_curve(&self) -> Vec<f64> {
        (0..HOURS)
            .map(|t| self.preference * (2.0 * PI * (t as f64 - 20.0) / HOURS as f64).cos())
            .collect()
    }

    /// Softmin allocation of the daily energy under the hourly bounds.
    pub fn respond(&self, prices: &[f64], preference: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = prices
            .iter()
            .zip(preference)
            .map(|(p, w)| (w - p) / self.tau)
            .collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        bounded_proportional(&s, self.energy, self.lower, self.upper)
    }
}

/// `u_t = clamp(k s_t, lo, hi)` with the scale `k` chosen so that
/// `sum u = total`. The sum is piecewise linear and nondecreasing in `k`,
/// so `k` is found exactly between consecutive breakpoints. Any rounding
/// residue goes to the unclamped hour with the most slack.
pub fn bounded_proportional(s: &[f64], total: f64, lo: f64, hi: f64) -> Vec<f64> {
    let n = s.len();
    let sum_at = |k: f64| -> f64 { s.iter().map(|v| (k * v).clamp(lo, hi)).sum() };
    let mut bps: Vec<f64> = s
        .iter()
        .filter(|v| **v > 0.0)
        .flat_map(|v| [lo / v, hi / v])
        .collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    // smallest breakpoint whose sum reaches the total
    let idx = bps.partition_point(|&k| sum_at(k) < total);
    let k = if idx == bps.len() {
        bps.last().copied().unwrap_or(0.0)
    } else {
        let k1 = bps[idx];
        let k0 = if idx == 0 { 0.0 } else { bps[idx - 1] };
        // linear between k0 and k1: only hours strictly inside the bounds move
        let fixed: f64 = s
            .iter()
            .filter(|v| {
                let mid = 0.5 * (k0 + k1) * **v;
                mid <= lo || mid >= hi
            })
            .map(|v| (0.5 * (k0 + k1) * v).clamp(lo, hi))
            .sum();
        let slope: f64 = s
            .iter()
            .filter(|v| {
                let mid = 0.5 * (k0 + k1) * **v;
                mid > lo && mid < hi
            })
            .sum();
        if slope > 0.0 {
            ((total - fixed) / slope).clamp(k0, k1)
        } else {
            k1
        }
    };
    let mut u: Vec<f64> = s.iter().map(|v| (k * v).clamp(lo, hi)).collect();
    let residue = total - u.iter().sum::<f64>();
    if residue != 0.0 {
        let slack = |i: usize| if residue > 0.0 { hi - u[i] } else { u[i] - lo };
        if let Some(i) = (0..n).filter(|&i| slack(i) >= residue.abs()).max_by(|&a, &b| slack(a).total_cmp(&slack(b))) {
            u[i] += residue;
        }
    }
    u
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketParams {
    /// Case 1 day-ahead prices: mean, daily swing, seasonal swing (as a
    /// fraction), AR(1) coefficient and innovation std.
    pub base_price: f64,
    pub daily_swing: f64,
    pub seasonal_swing: f64,
    pub ar_coef: f64,
    pub ar_std: f64,
    /// Fractional growth of the Case 1 price level per year.
    pub trend: f64,
    /// Case 2 price formation.
    pub intercept: f64,
    pub slope: f64,
    pub congestion_threshold: f64,
    pub congestion_coef: f64,
    pub noise_std: f64,
    /// Spike size range added on a spike hour.
    pub spike_min: f64,
    pub spike_max: f64,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            base_price: 35.0,
            daily_swing: 10.0,
            seasonal_swing: 0.1,
            ar_coef: 0.3,
            ar_std: 4.0,
            trend: 0.2,
            intercept: 12.0,
            slope: 0.03,
            congestion_threshold: 1000.0,
            congestion_coef: 1e-4,
            noise_std: 2.0,
            spike_min: 30.0,
            spike_max: 90.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    pub task: Task,
    pub seed: u64,
    /// Training length (days for UM, records for PPF); defaults 546 / 4320.
    pub train_len: Option<usize>,
    /// Test length; defaults 184 / 2160.
    pub test_len: Option<usize>,
    pub consumer: ConsumerParams,
    pub market: MarketParams,
    /// Per-hour spike probability; defaults 0 (UM) / 0.01 (PPF).
    pub spike_probability: Option<f64>,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            task: Task::Um,
            seed: 0,
            train_len: None,
            test_len: None,
            consumer: ConsumerParams::default(),
            market: MarketParams::default(),
            spike_probability: None,
        }
    }
}

impl SimulatorConfig {
    pub fn for_task(task: Task, seed: u64) -> Self {
        Self {
            task,
            seed,
            ..Self::default()
        }
    }

    pub fn train_len(&self) -> usize {
        self.train_len.unwrap_or(match self.task {
            Task::Um => 546,
            Task::Ppf => 4320,
        })
    }

    pub fn test_len(&self) -> usize {
        self.test_len.unwrap_or(match self.task {
            Task::Um => 184,
            Task::Ppf => 2160,
        })
    }

    pub fn spike_probability(&self) -> f64 {
        self.spike_probability.unwrap_or(match self.task {
            Task::Um => 0.0,
            Task::Ppf => 0.01,
        })
    }

    fn validate(&self) -> Result<(), HarnessError> {
        if self.train_len() == 0 || self.test_len() == 0 {
            return Err(HarnessError::InvalidConfig("simulated train and test lengths must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.spike_probability()) {
            return Err(HarnessError::InvalidConfig("spike probability must lie in [0, 1]".into()));
        }
        self.consumer.validate()
    }
}

/// Simulated train/test split plus the oracle.
#[derive(Clone, Debug)]
pub struct Simulated {
    pub train: Dataset,
    pub test: Dataset,
    pub oracle: GroundTruthOracle,
}

pub fn simulate(cfg: &SimulatorConfig) -> Result<Simulated, HarnessError> {
    match cfg.task {
        Task::Um => simulate_case1(cfg),
        Task::Ppf => simulate_case2(cfg),
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

/// Day-ahead prices for `days` consecutive days.
fn case1_prices(cfg: &SimulatorConfig, days: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let m = &cfg.market;
    let innov = Normal::new(0.0, m.ar_std).expect("finite std");
    let mut ar = 0.0;
    (0..days)
        .map(|d| {
            let season = (1.0 + m.seasonal_swing * (2.0 * PI * d as f64 / 365.0).sin()) * (1.0 + m.trend * d as f64 / 365.0);
            (0..HOURS)
                .map(|t| {
                    ar = m.ar_coef * ar + innov.sample(rng);
                    let shape = (2.0 * PI * (t as f64 - 11.0) / HOURS as f64).sin();
                    let mut p = season * (m.base_price + m.daily_swing * shape) + ar;
                    if rng.gen::<f64>() < cfg.spike_probability() {
                        p += rng.gen_range(m.spike_min..m.spike_max);
                    }
                    p
                })
                .collect()
        })
        .collect()
}

fn case1_days(cfg: &SimulatorConfig, days: usize, stream: u64) -> Result<Dataset, HarnessError> {
    let mut rng = rng_for(cfg.seed, stream);
    let prices = case1_prices(cfg, days, &mut rng);
    let c = &cfg.consumer;
    let nominal = c.preference_curve();
    let drift = Normal::new(0.0, c.jitter).expect("finite std");
    let samples = prices
        .into_iter()
        .map(|p| {
            let pref: Vec<f64> = nominal.iter().map(|w| w + drift.sample(&mut rng)).collect();
            let u = c.respond(&p, &pref);
            Sample::historical(p, u)
        })
        .collect();
    Ok(Dataset::new(samples, names("price_h", HOURS), names("load_h", HOURS))?)
}

/// Case 1: 24 hourly prices -> 24 hourly consumptions. The oracle's
/// pointwise truth is the response under the nominal preference curve.
pub fn simulate_case1(cfg: &SimulatorConfig) -> Result<Simulated, HarnessError> {
    cfg.validate()?;
    let (n_train, n_test) = (cfg.train_len(), cfg.test_len());
    let all = case1_days(cfg, n_train + n_test, 1)?;
    let (train, test) = all.split_time(n_train)?;
    let reference = case1_days(cfg, REFERENCE_FACTOR * n_train, 2)?;
    let consumer = cfg.consumer.clone();
    let nominal = consumer.preference_curve();
    let truth = Arc::new(move |x: &[f64]| consumer.respond(x, &nominal));
    Ok(Simulated {
        train,
        test,
        oracle: GroundTruthOracle::new(Some(truth), reference),
    })
}

/// Hourly series, one row per hour in [`CASE2_SERIES`] order.
pub fn case2_series(cfg: &SimulatorConfig, hours: usize, stream: u64) -> Vec<[f64; 6]> {
    let mut rng = rng_for(cfg.seed, stream);
    let m = &cfg.market;
    let n01 = Normal::new(0.0, 1.0).expect("unit normal");
    let (mut temp_ar, mut wind_ar, mut cloud_ar, mut load_ar) = (0.0, 0.0, 0.0, 0.0);
    (0..hours)
        .map(|k| {
            let h = (k % HOURS) as f64;
            let d = (k / HOURS) as f64;
            temp_ar = 0.95 * temp_ar + 0.6 * n01.sample(&mut rng);
            wind_ar = 0.97 * wind_ar + 0.25 * n01.sample(&mut rng);
            cloud_ar = 0.9 * cloud_ar + 0.3 * n01.sample(&mut rng);
            load_ar = 0.9 * load_ar + 15.0 * n01.sample(&mut rng);
            let temperature = 16.0 + 9.0 * (2.0 * PI * (d - 105.0) / 365.0).sin()
                + 4.0 * (2.0 * PI * (h - 9.0) / 24.0).sin()
                + temp_ar;
            let daily = (2.0 * PI * (h - 8.0) / 24.0).sin();
            let load = 1000.0 + 180.0 * daily + 12.0 * (temperature - 18.0).abs() + load_ar;
            let wind = 200.0 / (1.0 + (-wind_ar).exp());
            let solar = if (6.0..=18.0).contains(&h) {
                let clear = (PI * (h - 6.0) / 12.0).sin().max(0.0);
                300.0 * clear / (1.0 + (cloud_ar).exp())
            } else {
                0.0
            };
            let net = load - wind - solar;
            let gas = (net - 450.0).max(0.0);
            let congestion = (net - m.congestion_threshold).max(0.0);
            let spread = m.noise_std * (1.0 + net.max(0.0) / 1000.0);
            let mut price = m.intercept + m.slope * net + m.congestion_coef * congestion * congestion
                + spread * n01.sample(&mut rng);
            if rng.gen::<f64>() < cfg.spike_probability() {
                price += rng.gen_range(m.spike_min..m.spike_max);
            }
            [load, temperature, wind, solar, gas, price]
        })
        .collect()
}

fn case2_windows(series: &[[f64; 6]]) -> Vec<Sample> {
    (CASE2_WINDOW..series.len())
        .map(|k| {
            let x: Vec<f64> = series[k - CASE2_WINDOW..k].iter().flatten().copied().collect();
            Sample::historical(x, vec![series[k][5]])
        })
        .collect()
}

fn case2_feature_names() -> Vec<String> {
    (0..CASE2_WINDOW)
        .flat_map(|lag| {
            CASE2_SERIES
                .iter()
                .map(move |s| format!("{s}_lag{}", CASE2_WINDOW - lag))
        })
        .collect()
}

/// Case 2: 18 lagged features -> next-hour price. The next-hour price
/// depends on unobserved shocks, so the oracle has no pointwise truth; its
/// reference sample comes from an independent stretch of the same system.
pub fn simulate_case2(cfg: &SimulatorConfig) -> Result<Simulated, HarnessError> {
    cfg.validate()?;
    let (n_train, n_test) = (cfg.train_len(), cfg.test_len());
    let series = case2_series(cfg, n_train + n_test + CASE2_WINDOW, 1);
    let all = Dataset::new(case2_windows(&series), case2_feature_names(), vec!["price_next".into()])?;
    let (train, test) = all.split_time(n_train)?;
    let ref_series = case2_series(cfg, REFERENCE_FACTOR * n_train + CASE2_WINDOW, 2);
    let reference = Dataset::new(case2_windows(&ref_series), case2_feature_names(), vec!["price_next".into()])?;
    Ok(Simulated {
        train,
        test,
        oracle: GroundTruthOracle::new(None, reference),
    })
}
