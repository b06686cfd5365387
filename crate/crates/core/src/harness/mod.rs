//! Simulators, the scenario matrix and the noise-sensitivity protocol.

mod experiment;
mod sim;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::AggregationConfig;
use crate::neural::{Activation, LossKind, NetworkSpec};

pub use experiment::{
    default_library, run_matrix, sensitivity_noise, CellReport, Experiment, KktDiagnostic, ModelSummary,
    ReportBundle, ScenarioSummary, SeedCalibration, SensitivityReport, SensitivityRow, Spread,
};
pub use sim::{
    bounded_proportional, case2_series, simulate, simulate_case1, simulate_case2, ConsumerParams, MarketParams,
    Simulated, SimulatorConfig, CASE2_SERIES, CASE2_WINDOW, HOURS,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid consumer parameters: {0}")]
    InvalidConsumerParams(String),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("{scenario} seed {seed}: {source}")]
    Cell {
        scenario: String,
        seed: u64,
        source: Box<crate::Error>,
    },
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// User modeling (Case 1) or probabilistic price forecasting (Case 2).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    #[default]
    #[serde(rename = "UM")]
    Um,
    #[serde(rename = "PPF")]
    Ppf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DataKind {
    #[serde(rename = "KAT")]
    Kat,
    O,
    #[serde(rename = "DA1")]
    Da1,
    #[serde(rename = "DA2")]
    Da2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "SM")]
    Sm,
    #[serde(rename = "RM")]
    Rm,
}

/// One cell row of the matrix, written `KAT-LM[UM]`. A PPF scenario trains
/// one network per quantile level unless `quantile` pins a single level
/// (`O-LM[PPF]@0.5`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScenarioSpec {
    pub data: DataKind,
    pub model: ModelKind,
    pub task: Task,
    pub quantile: Option<f64>,
}

impl ScenarioSpec {
    pub const fn new(data: DataKind, model: ModelKind, task: Task) -> Self {
        Self {
            data,
            model,
            task,
            quantile: None,
        }
    }

    /// KAT-LM, O-LM, O-SM, O-RM, DA1-LM, DA2-LM.
    pub fn six(task: Task) -> Vec<Self> {
        use DataKind::*;
        use ModelKind::*;
        [(Kat, Lm), (O, Lm), (O, Sm), (O, Rm), (Da1, Lm), (Da2, Lm)]
            .into_iter()
            .map(|(d, m)| Self::new(d, m, task))
            .collect()
    }

    /// Quantile levels trained in this scenario; empty for UM.
    pub fn quantiles(&self) -> Vec<f64> {
        match (self.task, self.quantile) {
            (Task::Um, _) => Vec::new(),
            (Task::Ppf, Some(q)) => vec![q],
            (Task::Ppf, None) => crate::diagnostics::QUANTILES.to_vec(),
        }
    }

    /// Network architecture for the scenario, given the data dimensions.
    pub fn network(&self, input_dim: usize, output_dim: usize, loss: LossKind) -> NetworkSpec {
        match self.task {
            Task::Um => {
                let (sizes, dropout) = match self.model {
                    ModelKind::Lm => (vec![input_dim, 48, output_dim], None),
                    ModelKind::Sm => (vec![input_dim, 9, 9, output_dim], None),
                    ModelKind::Rm => (vec![input_dim, 48, output_dim], Some(0.5)),
                };
                NetworkSpec::mlp(&sizes, Activation::Relu, dropout, loss)
            }
            Task::Ppf => {
                let (cells, units, dropout) = match self.model {
                    ModelKind::Lm => (6, 30, None),
                    ModelKind::Sm => (5, 20, None),
                    ModelKind::Rm => (6, 30, Some(0.2)),
                };
                NetworkSpec::stacked_rnn(
                    input_dim,
                    CASE2_WINDOW,
                    cells,
                    units,
                    Activation::Tanh,
                    dropout,
                    output_dim,
                    loss,
                )
            }
        }
    }

    fn sort_key(&self) -> (Task, DataKind, ModelKind, u64) {
        (self.task, self.data, self.model, self.quantile.map_or(0, f64::to_bits))
    }
}

impl Eq for ScenarioSpec {}

impl PartialOrd for ScenarioSpec {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ScenarioSpec {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for ScenarioSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.data {
            DataKind::Kat => "KAT",
            DataKind::O => "O",
            DataKind::Da1 => "DA1",
            DataKind::Da2 => "DA2",
        };
        let m = match self.model {
            ModelKind::Lm => "LM",
            ModelKind::Sm => "SM",
            ModelKind::Rm => "RM",
        };
        let t = match self.task {
            Task::Um => "UM",
            Task::Ppf => "PPF",
        };
        write!(f, "{d}-{m}[{t}]")?;
        if let Some(q) = self.quantile {
            write!(f, "@{q}")?;
        }
        Ok(())
    }
}

impl FromStr for ScenarioSpec {
    type Err = HarnessError;

    /// Accepts `KAT-LM[UM]`, `O-RM[PPF]@0.25`, and `KAT-LM` (task UM).
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        let bad = || HarnessError::UnknownScenario(s.to_string());
        let (head, quantile) = match s.split_once('@') {
            Some((h, q)) => (h, Some(q.parse::<f64>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let (pair, task) = match head.split_once('[') {
            Some((p, rest)) => {
                let t = match rest.strip_suffix(']').ok_or_else(bad)? {
                    "UM" => Task::Um,
                    "PPF" => Task::Ppf,
                    _ => return Err(bad()),
                };
                (p, t)
            }
            None => (head, Task::Um),
        };
        let (d, m) = pair.split_once('-').ok_or_else(bad)?;
        let data = match d {
            "KAT" => DataKind::Kat,
            "O" => DataKind::O,
            "DA1" => DataKind::Da1,
            "DA2" => DataKind::Da2,
            _ => return Err(bad()),
        };
        let model = match m {
            "LM" => ModelKind::Lm,
            "SM" => ModelKind::Sm,
            "RM" => ModelKind::Rm,
            _ => return Err(bad()),
        };
        if let Some(q) = quantile {
            if task != Task::Ppf || !(q > 0.0 && q < 1.0) {
                return Err(bad());
            }
        }
        Ok(Self {
            data,
            model,
            task,
            quantile,
        })
    }
}

impl TryFrom<String> for ScenarioSpec {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self, HarnessError> {
        s.parse()
    }
}

impl From<ScenarioSpec> for String {
    fn from(s: ScenarioSpec) -> String {
        s.to_string()
    }
}

/// Synthetic sample counts; `None` picks the task default (1500 for UM,
/// 10000 for PPF).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationCounts {
    pub kat: Option<usize>,
    pub da1: Option<usize>,
    pub da2: Option<usize>,
}

impl AugmentationCounts {
    fn default_for(task: Task) -> usize {
        match task {
            Task::Um => 1500,
            Task::Ppf => 10000,
        }
    }

    pub fn resolve(&self, kind: DataKind, task: Task) -> usize {
        let v = match kind {
            DataKind::Kat => self.kat,
            DataKind::Da1 => self.da1,
            DataKind::Da2 => self.da2,
            DataKind::O => return 0,
        };
        v.unwrap_or(Self::default_for(task))
    }
}

/// Site-generation knobs for KAT synthesis; the count comes from
/// [`AugmentationCounts`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiteSettings {
    pub margin: f64,
    pub sparse_bias: f64,
}

impl Default for SiteSettings {
    fn default() -> Self {
        let d = crate::augmentation::SiteGenConfig::new(1, 0);
        Self {
            margin: d.margin,
            sparse_bias: d.sparse_bias,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConstants {
    pub eta_min: f64,
    pub eta_max: f64,
    pub horizon: usize,
}

impl Default for SamplerConstants {
    fn default() -> Self {
        Self {
            eta_min: 0.5,
            eta_max: 0.95,
            horizon: 600,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Gradient-noise sampling period; `None` disables it.
    pub grad_noise_every: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            iterations: 4000,
            batch_size: 32,
            step_size: 1e-3,
            grad_noise_every: Some(50),
        }
    }
}

/// Train/test CSV files (with JSON sidecars) used instead of a simulator.
/// No oracle exists for such data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvInputs {
    pub train: PathBuf,
    pub test: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_levels() -> Vec<f64> {
    vec![0.01, 0.02, 0.03, 0.04, 0.05, 0.06]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenarios: Vec<ScenarioSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    #[serde(default)]
    pub data: Option<CsvInputs>,
    /// Classical model library for KAT; defaults to [`default_library`].
    #[serde(default)]
    pub library: Option<Vec<crate::classical::ModelDescriptor>>,
    #[serde(default)]
    pub augmentation: AugmentationCounts,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub sites: SiteSettings,
    #[serde(default)]
    pub sampler: SamplerConstants,
    #[serde(default)]
    pub train: TrainSettings,
    /// Multiplicative noise levels for the sensitivity protocol.
    #[serde(default = "default_levels")]
    pub noise_levels: Vec<f64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; `None` uses the rayon default.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(scenarios: Vec<ScenarioSpec>, seeds: Vec<u64>, simulator: SimulatorConfig) -> Self {
        Self {
            scenarios,
            seeds,
            simulator,
            data: None,
            library: None,
            augmentation: AugmentationCounts::default(),
            aggregation: AggregationConfig::default(),
            sites: SiteSettings::default(),
            sampler: SamplerConstants::default(),
            train: TrainSettings::default(),
            noise_levels: default_levels(),
            output_dir: None,
            threads: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.scenarios.is_empty() || self.seeds.is_empty() {
            return bad("scenario and seed lists must be nonempty".into());
        }
        if let Some(s) = self.scenarios.iter().find(|s| s.task != self.simulator.task) {
            return bad(format!("scenario {s} does not match task {:?}", self.simulator.task));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("duplicate seeds".into());
        }
        let mut sc = self.scenarios.clone();
        sc.sort();
        sc.dedup();
        if sc.len() != self.scenarios.len() {
            return bad("duplicate scenarios".into());
        }
        if self.noise_levels.iter().any(|l| !(0.0..1.0).contains(l)) {
            return bad("noise levels must lie in [0, 1)".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        Ok(())
    }
}
