//! The scenario matrix and the noise-sensitivity protocol.
//!
//! Every (scenario, seed) cell is independent. Cells run on a rayon pool and
//! are reassembled in (scenario, seed) order, so reports do not depend on the
//! thread count. KAT synthetic data depend only on the seed and are built
//! once per seed and shared between the cells and sensitivity runs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CsvInputs, DataKind, ExperimentConfig, HarnessError, ModelKind, ScenarioSpec, SimulatorConfig, Task};
use crate::augmentation::{augment_da1, augment_da2, compute_weights, generate_sites, synthesize, SiteGenConfig};
use crate::classical::{
    calibrate, calibrate_inverse_kkt, CalibrationMethod, ClassicalModelKind, ModelDescriptor,
};
use crate::dataset::{Dataset, Normalization, Sample};
use crate::diagnostics::{
    evaluate_point, evaluate_quantiles, manifold_errors, percentile, GroundTruthOracle, MetricsReport, TrainedModel,
};
use crate::neural::LossKind;
use crate::training::{train, DiagnosticFlags, Sampling, TrainConfig, TrainTrace};

type HResult<T> = std::result::Result<T, HarnessError>;

// stream tags for per-seed derived seeds
const TAG_SITES: u64 = 1;
const TAG_DA1: u64 = 2;
const TAG_DA2: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_LIBRARY: u64 = 100;

fn derive(seed: u64, tag: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r.next_u64()
}

/// Default classical library. UM: one dispatch model with the consumer's
/// published limits. PPF: an affine model plus ten jittered variants each
/// of kernel ridge and random forest.
pub fn default_library(task: Task, sim: &SimulatorConfig) -> Vec<ModelDescriptor> {
    match task {
        Task::Um => {
            let c = &sim.consumer;
            vec![ModelDescriptor::new(
                ClassicalModelKind::DispatchLoad {
                    curvature: 1.0,
                    energy: c.energy,
                    upper: c.upper,
                    lower: c.lower,
                    ramp: Some(c.ramp),
                    shape: Vec::new(),
                },
                0,
            )]
        }
        Task::Ppf => {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6c69_6272);
            let mut jitter = |v: f64| v * rng.gen_range(0.8..=1.2);
            let mut lib = vec![ModelDescriptor::new(ClassicalModelKind::Affine, 0)];
            for k in 0..10u64 {
                lib.push(ModelDescriptor::new(
                    ClassicalModelKind::KernelRidge {
                        gamma: jitter(10.0),
                        ridge: jitter(0.1),
                        max_points: Some(1000),
                    },
                    k,
                ));
            }
            for k in 0..10u64 {
                lib.push(ModelDescriptor::new(
                    ClassicalModelKind::RandomForest {
                        trees: jitter(50.0).round() as usize,
                        max_depth: jitter(12.0).round() as usize,
                        min_leaf: jitter(5.0).round().max(1.0) as usize,
                        max_features: None,
                    },
                    k,
                ));
            }
            lib
        }
    }
}

fn method_for(kind: &ClassicalModelKind) -> CalibrationMethod {
    match kind {
        ClassicalModelKind::DispatchLoad { .. } => CalibrationMethod::Pso,
        _ => CalibrationMethod::ClosedForm,
    }
}

/// Median and quartiles across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| Self {
            median: percentile(values, 0.5),
            q1: percentile(values, 0.25),
            q3: percentile(values, 0.75),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub kind: String,
    pub e_star: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedCalibration {
    pub seed: u64,
    pub models: Vec<ModelSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub scenario: ScenarioSpec,
    pub seed: u64,
    /// Training-set size after augmentation.
    pub train_size: usize,
    pub metrics: MetricsReport,
    /// Final mini-batch loss (normalized units), averaged over the
    /// quantile networks for PPF.
    pub final_batch_loss: f64,
    pub mean_grad_noise: Option<f64>,
    /// Mean `|f - y_syn|` over the seed's KAT synthetic sites, when the
    /// oracle has pointwise truth.
    pub manifold_pred_minus_syn: Option<f64>,
    pub manifold_pred_minus_real: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: ScenarioSpec,
    pub seeds: usize,
    pub rmse: Spread,
    pub mape: Spread,
    pub smape: Spread,
    pub train_loss: Spread,
    pub test_loss: Spread,
    pub overfit_gap: Spread,
    pub mean_grad_noise: Option<Spread>,
    pub manifold_pred_minus_syn: Option<Spread>,
    pub crps: Option<Spread>,
    pub winkler: Option<Spread>,
    pub crpss: Option<Spread>,
}

/// Exact inverse-KKT fit of the dispatch model on the day aggregated to
/// six four-hour blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktDiagnostic {
    pub periods: usize,
    pub curvature: f64,
    pub e_star: f64,
    pub objective: f64,
    pub shape: Vec<f64>,
    pub nodes: usize,
    pub leaves: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub task: Task,
    pub scenarios: Vec<ScenarioSpec>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
    pub summary: Vec<ScenarioSummary>,
    pub calibration: Vec<SeedCalibration>,
    pub kkt: Option<KktDiagnostic>,
}

impl ReportBundle {
    pub fn cells_for(&self, scenario: &ScenarioSpec) -> impl Iterator<Item = &CellReport> {
        let s = *scenario;
        self.cells.iter().filter(move |c| c.scenario == s)
    }

    pub fn summary_for(&self, scenario: &ScenarioSpec) -> Option<&ScenarioSummary> {
        self.summary.iter().find(|s| s.scenario == *scenario)
    }

    pub fn to_json(&self) -> HResult<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from(
            "scenario,seed,train_size,rmse,mape,smape,crps,winkler,train_loss,test_loss,overfit_gap,mean_grad_noise,manifold_pred_minus_syn\n",
        );
        let o = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for c in &self.cells {
            let m = &c.metrics;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{:e},{:e},{:e},{},{}\n",
                c.scenario,
                c.seed,
                c.train_size,
                o(m.rmse),
                o(m.mape),
                o(m.smape),
                o(m.crps),
                o(m.winkler),
                m.train_loss,
                m.test_loss,
                m.overfit_gap,
                o(c.mean_grad_noise),
                o(c.manifold_pred_minus_syn)
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "scenario,seeds,rmse_median,rmse_q1,rmse_q3,mape_median,smape_median,overfit_gap_median,grad_noise_median,crps_median\n",
        );
        let o = |v: Option<Spread>| v.map(|x| format!("{:e}", x.median)).unwrap_or_default();
        for r in &self.summary {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{},{}\n",
                r.scenario,
                r.seeds,
                r.rmse.median,
                r.rmse.q1,
                r.rmse.q3,
                r.mape.median,
                r.smape.median,
                r.overfit_gap.median,
                o(r.mean_grad_noise),
                o(r.crps)
            ));
        }
        s
    }

    /// `report.json`, `cells.csv` and `summary.csv` in `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> HResult<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json()?)?;
        std::fs::write(dir.join("cells.csv"), self.cells_csv())?;
        std::fs::write(dir.join("summary.csv"), self.summary_csv())?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub level: f64,
    pub kat_rmse: Vec<f64>,
    pub kat_median: f64,
    pub baseline_median: f64,
    /// `kat_median - baseline_median`; negative means KAT still wins.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub scenario: ScenarioSpec,
    pub baseline: ScenarioSpec,
    pub seeds: Vec<u64>,
    pub baseline_rmse: Vec<f64>,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,kat_median_rmse,baseline_median_rmse,gap\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                r.level, r.kat_median, r.baseline_median, r.gap
            ));
        }
        s
    }
}

struct KatData {
    sd: Dataset,
    calibration: SeedCalibration,
}

struct CellOutput {
    report: CellReport,
    traces: Vec<TrainTrace>,
}

/// Resolved data plus a per-seed cache of KAT synthetic data.
pub struct Experiment {
    cfg: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    oracle: Option<GroundTruthOracle>,
    norm: Normalization,
    library: Vec<ModelDescriptor>,
    kat_cache: Mutex<BTreeMap<u64, Arc<KatData>>>,
}

fn cell_err(scenario: impl ToString, seed: u64) -> impl FnOnce(crate::Error) -> HarnessError {
    move |e| HarnessError::Cell {
        scenario: scenario.to_string(),
        seed,
        source: Box::new(e),
    }
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> HResult<Self> {
        cfg.validate()?;
        let (train, test, oracle) = match &cfg.data {
            Some(CsvInputs { train, test }) => (
                Dataset::load_with_sidecar(train)?,
                Dataset::load_with_sidecar(test)?,
                None,
            ),
            None => {
                let sim = super::simulate(&cfg.simulator)?;
                (sim.train, sim.test, Some(sim.oracle))
            }
        };
        if train.n_synthetic() > 0 || test.n_synthetic() > 0 {
            return Err(HarnessError::InvalidConfig("train and test data must be historical".into()));
        }
        let norm = Normalization::fit(&train);
        let library = cfg
            .library
            .clone()
            .unwrap_or_else(|| default_library(cfg.simulator.task, &cfg.simulator));
        Ok(Self {
            cfg,
            train,
            test,
            oracle,
            norm,
            library,
            kat_cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn test_set(&self) -> &Dataset {
        &self.test
    }

    pub fn oracle(&self) -> Option<&GroundTruthOracle> {
        self.oracle.as_ref()
    }

    fn in_pool<R: Send>(&self, f: impl FnOnce() -> R + Send) -> HResult<R> {
        match self.cfg.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }

    fn kat_data(&self, seed: u64) -> crate::Result<Arc<KatData>> {
        if let Some(k) = self.kat_cache.lock().expect("cache lock").get(&seed) {
            return Ok(k.clone());
        }
        let mut models = Vec::with_capacity(self.library.len());
        for (i, d) in self.library.iter().enumerate() {
            let mut d = d.clone();
            d.seed ^= derive(seed, TAG_LIBRARY + i as u64);
            models.push(calibrate(&d, &self.train, method_for(&d.kind))?);
        }
        let errors: Vec<f64> = models.iter().map(|m| m.e_star).collect();
        let weights = compute_weights(&errors, &self.cfg.aggregation)?;
        let count = self.cfg.augmentation.resolve(DataKind::Kat, self.cfg.simulator.task);
        let site_cfg = SiteGenConfig {
            margin: self.cfg.sites.margin,
            sparse_bias: self.cfg.sites.sparse_bias,
            ..SiteGenConfig::new(count, derive(seed, TAG_SITES))
        };
        let sites = generate_sites(&self.train, &site_cfg)?;
        let sd = synthesize(&models, &weights, &sites)?;
        let sd = self.train.with_samples(sd.into_samples())?;
        let calibration = SeedCalibration {
            seed,
            models: models
                .iter()
                .zip(&weights.gamma)
                .map(|(m, g)| ModelSummary {
                    kind: m.descriptor.kind.name().to_string(),
                    e_star: m.e_star,
                    gamma: *g,
                })
                .collect(),
        };
        let k = Arc::new(KatData { sd, calibration });
        self.kat_cache.lock().expect("cache lock").insert(seed, k.clone());
        Ok(k)
    }

    /// KAT synthetic data for `seed` (calibrated library, weighted ensemble
    /// at generated sites).
    pub fn kat_synthetic(&self, seed: u64) -> crate::Result<Dataset> {
        Ok(self.kat_data(seed)?.sd.clone())
    }

    fn synthetic_for(&self, kind: DataKind, seed: u64) -> crate::Result<Dataset> {
        let task = self.cfg.simulator.task;
        let n = self.cfg.augmentation.resolve(kind, task);
        Ok(match kind {
            DataKind::O => self.train.empty_like(),
            DataKind::Kat => self.kat_synthetic(seed)?,
            DataKind::Da1 => augment_da1(&self.train, n, derive(seed, TAG_DA1))?,
            DataKind::Da2 => augment_da2(&self.train, n, derive(seed, TAG_DA2))?,
        })
    }

    fn train_config(&self, sc: &ScenarioSpec, seed: u64, loss: LossKind) -> TrainConfig {
        let t = &self.cfg.train;
        let s = &self.cfg.sampler;
        TrainConfig {
            batch_size: t.batch_size,
            step_size: t.step_size,
            iterations: t.iterations,
            eta_min: Some(s.eta_min),
            eta_max: s.eta_max,
            horizon: s.horizon,
            loss,
            sampling: if sc.data == DataKind::Kat {
                Sampling::Dynamic
            } else {
                Sampling::Uniform
            },
            seed,
            ..TrainConfig::default()
        }
    }

    /// Trains and evaluates one cell on `sd` (synthetic part, possibly
    /// empty).
    fn run_on(&self, sc: &ScenarioSpec, seed: u64, sd: &Dataset, diagnostics: bool) -> crate::Result<CellOutput> {
        let data = if sd.is_empty() {
            self.train.clone()
        } else {
            Dataset::merge(&self.train, sd)?
        };
        let normed = self.norm.apply(&data);
        let flags = DiagnosticFlags {
            every: if diagnostics { self.cfg.train.grad_noise_every } else { None },
        };
        let (fin, fout) = (self.train.feature_dim(), self.train.target_dim());
        let losses: Vec<LossKind> = match sc.task {
            Task::Um => vec![LossKind::Mse],
            Task::Ppf => sc.quantiles().into_iter().map(|q| LossKind::Pinball { q }).collect(),
        };
        let mut models = Vec::with_capacity(losses.len());
        let mut traces = Vec::with_capacity(losses.len());
        for (k, loss) in losses.iter().enumerate() {
            let spec = sc.network(fin, fout, *loss);
            let cfg = self.train_config(sc, seed.wrapping_add(k as u64 * 0x9e37_79b9), *loss);
            let trace = train(&spec, &normed, &cfg, flags)?;
            models.push(TrainedModel::new(&spec, trace.params.clone(), Some(self.norm.clone()))?);
            traces.push(trace);
        }
        let metrics = match (sc.task, models.as_slice()) {
            (Task::Ppf, [a, b, c]) => evaluate_quantiles([a, b, c], &self.train, &self.test, None)?,
            _ => evaluate_point(&models[0], &self.train, &self.test, losses[0])?,
        };
        let gn: Vec<f64> = traces.iter().filter_map(TrainTrace::mean_grad_noise).collect();
        let mean_grad_noise = (!gn.is_empty()).then(|| gn.iter().sum::<f64>() / gn.len() as f64);
        let final_batch_loss =
            traces.iter().map(|t| t.loss.last().copied().unwrap_or(f64::NAN)).sum::<f64>() / traces.len() as f64;
        // manifold errors on the seed's KAT sites, median network for PPF
        let (mut m_syn, mut m_real) = (None, None);
        if diagnostics && self.oracle.as_ref().is_some_and(GroundTruthOracle::has_truth) && self.wants_kat() {
            let kat = self.kat_data(seed)?;
            let rep = manifold_errors(&models[models.len() / 2], &kat.sd, self.oracle.as_ref())?;
            m_syn = Some(rep.mean_abs_pred_minus_syn);
            m_real = Some(rep.mean_abs_pred_minus_real);
        }
        Ok(CellOutput {
            report: CellReport {
                scenario: *sc,
                seed,
                train_size: data.len(),
                metrics,
                final_batch_loss,
                mean_grad_noise,
                manifold_pred_minus_syn: m_syn,
                manifold_pred_minus_real: m_real,
            },
            traces,
        })
    }

    fn wants_kat(&self) -> bool {
        self.cfg.scenarios.iter().any(|s| s.data == DataKind::Kat)
    }

    fn run_cell(&self, sc: &ScenarioSpec, seed: u64) -> crate::Result<CellOutput> {
        let sd = self.synthetic_for(sc.data, seed)?;
        self.run_on(sc, seed, &sd, true)
    }

    fn kkt_diagnostic(&self) -> crate::Result<Option<KktDiagnostic>> {
        const BLOCKS: usize = 6;
        let Some(ClassicalModelKind::DispatchLoad {
            curvature,
            energy,
            upper,
            lower,
            ..
        }) = self.library.first().map(|d| &d.kind)
        else {
            return Ok(None);
        };
        let d = self.train.feature_dim();
        if d != self.train.target_dim() || !d.is_multiple_of(BLOCKS) {
            return Ok(None);
        }
        let w = d / BLOCKS;
        let samples = self
            .train
            .samples()
            .iter()
            .map(|s| {
                let p = s.features.chunks(w).map(|c| c.iter().sum::<f64>() / w as f64).collect();
                let u = s.target.chunks(w).map(|c| c.iter().sum::<f64>()).collect();
                Sample::historical(p, u)
            })
            .collect();
        let agg = Dataset::from_samples(samples)?;
        let desc = ModelDescriptor::new(
            ClassicalModelKind::DispatchLoad {
                curvature: curvature / w as f64,
                energy: *energy,
                upper: upper * w as f64,
                lower: lower * w as f64,
                ramp: None,
                shape: Vec::new(),
            },
            0,
        );
        let (model, sol) = calibrate_inverse_kkt(&desc, &agg)?;
        Ok(Some(KktDiagnostic {
            periods: BLOCKS,
            curvature: curvature / w as f64,
            e_star: model.e_star,
            objective: sol.objective,
            shape: sol.shape,
            nodes: sol.stats.nodes,
            leaves: sol.stats.leaves,
            pruned: sol.stats.pruned,
        }))
    }

    fn sorted_cells(&self) -> Vec<(ScenarioSpec, u64)> {
        let mut scenarios = self.cfg.scenarios.clone();
        scenarios.sort();
        let mut seeds = self.cfg.seeds.clone();
        seeds.sort_unstable();
        scenarios
            .iter()
            .flat_map(|s| seeds.iter().map(move |seed| (*s, *seed)))
            .collect()
    }

    fn sorted_seeds(&self) -> Vec<u64> {
        let mut seeds = self.cfg.seeds.clone();
        seeds.sort_unstable();
        seeds
    }

    /// Builds KAT data for every seed ahead of the cells.
    fn prepare_kat(&self, seeds: &[u64]) -> HResult<Vec<SeedCalibration>> {
        let out: Vec<crate::Result<Arc<KatData>>> =
            self.in_pool(|| seeds.par_iter().map(|s| self.kat_data(*s)).collect())?;
        out.into_iter()
            .zip(seeds)
            .map(|(r, s)| r.map(|k| k.calibration.clone()).map_err(cell_err("KAT synthesis", *s)))
            .collect()
    }

    pub fn run_matrix(&self) -> HResult<ReportBundle> {
        let seeds = self.sorted_seeds();
        let calibration = if self.wants_kat() {
            self.prepare_kat(&seeds)?
        } else {
            Vec::new()
        };
        let cells = self.sorted_cells();
        let outputs: Vec<crate::Result<CellOutput>> =
            self.in_pool(|| cells.par_iter().map(|(sc, seed)| self.run_cell(sc, *seed)).collect())?;
        let mut reports = Vec::with_capacity(outputs.len());
        let mut traces = Vec::with_capacity(outputs.len());
        for (out, (sc, seed)) in outputs.into_iter().zip(&cells) {
            let out = out.map_err(cell_err(sc, *seed))?;
            reports.push(out.report);
            traces.push(out.traces);
        }
        fill_crpss(&mut reports);
        let kkt = if self.cfg.simulator.task == Task::Um {
            self.kkt_diagnostic().map_err(cell_err("KKT diagnostic", 0))?
        } else {
            None
        };
        let mut scenarios = self.cfg.scenarios.clone();
        scenarios.sort();
        let summary = scenarios.iter().map(|s| summarize(s, &reports)).collect();
        let bundle = ReportBundle {
            task: self.cfg.simulator.task,
            scenarios,
            seeds,
            cells: reports,
            summary,
            calibration,
            kkt,
        };
        if let Some(dir) = &self.cfg.output_dir {
            bundle.write(dir)?;
            let tdir = dir.join("traces");
            std::fs::create_dir_all(&tdir)?;
            for ((sc, seed), ts) in cells.iter().zip(&traces) {
                let qs = sc.quantiles();
                for (k, t) in ts.iter().enumerate() {
                    let suffix = qs.get(k).map(|q| format!("_q{q}")).unwrap_or_default();
                    let name = format!("{}_seed{seed}{suffix}.csv", file_safe(&sc.to_string()));
                    t.write_csv(tdir.join(name)).map_err(|e| cell_err(sc, *seed)(e.into()))?;
                }
            }
        }
        Ok(bundle)
    }

    /// KAT reruns with synthetic targets scaled by `1 + level * u`, where
    /// `u ~ U(-1, 1)` is drawn once per seed and component so that levels
    /// differ only in magnitude. The baseline is the O scenario with the
    /// same network; its RMSEs are taken from `baseline` when present.
    pub fn sensitivity(&self, baseline: Option<&ReportBundle>) -> HResult<SensitivityReport> {
        let mut kats: Vec<ScenarioSpec> = self.cfg.scenarios.iter().filter(|s| s.data == DataKind::Kat).copied().collect();
        kats.sort();
        let Some(kat) = kats.first().copied() else {
            return Err(HarnessError::InvalidConfig("sensitivity needs a KAT scenario".into()));
        };
        let base = ScenarioSpec {
            data: DataKind::O,
            ..kat
        };
        let seeds = self.sorted_seeds();
        self.prepare_kat(&seeds)?;
        let mut levels = self.cfg.noise_levels.clone();
        levels.sort_by(f64::total_cmp);
        levels.dedup();

        let mut jobs: Vec<(Option<f64>, u64)> = Vec::new();
        let have = |seed: u64| {
            baseline.and_then(|b| {
                b.cells
                    .iter()
                    .find(|c| c.scenario == base && c.seed == seed)
                    .and_then(|c| c.metrics.rmse)
            })
        };
        for &s in &seeds {
            if have(s).is_none() {
                jobs.push((None, s));
            }
        }
        for &l in &levels {
            for &s in &seeds {
                jobs.push((Some(l), s));
            }
        }
        let results: Vec<crate::Result<f64>> = self.in_pool(|| {
            jobs.par_iter()
                .map(|(level, seed)| -> crate::Result<f64> {
                    let out = match level {
                        None => self.run_on(&base, *seed, &self.train.empty_like(), false)?,
                        Some(l) => {
                            let sd = self.noisy_synthetic(*seed, *l)?;
                            self.run_on(&kat, *seed, &sd, false)?
                        }
                    };
                    Ok(out.report.metrics.rmse.unwrap_or(f64::NAN))
                })
                .collect()
        })?;
        let mut values = BTreeMap::new();
        for (r, (level, seed)) in results.into_iter().zip(&jobs) {
            let name = level.map_or(base.to_string(), |l| format!("{kat} noise {l}"));
            let v = r.map_err(cell_err(name, *seed))?;
            values.insert((level.map(f64::to_bits), *seed), v);
        }
        let baseline_rmse: Vec<f64> = seeds
            .iter()
            .map(|s| have(*s).unwrap_or_else(|| values[&(None, *s)]))
            .collect();
        let baseline_median = percentile(&baseline_rmse, 0.5);
        let rows = levels
            .iter()
            .map(|l| {
                let kat_rmse: Vec<f64> = seeds.iter().map(|s| values[&(Some(l.to_bits()), *s)]).collect();
                let kat_median = percentile(&kat_rmse, 0.5);
                SensitivityRow {
                    level: *l,
                    kat_rmse,
                    kat_median,
                    baseline_median,
                    gap: kat_median - baseline_median,
                }
            })
            .collect();
        let report = SensitivityReport {
            scenario: kat,
            baseline: base,
            seeds,
            baseline_rmse,
            rows,
        };
        if let Some(dir) = &self.cfg.output_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("sensitivity.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            let mut f = std::fs::File::create(dir.join("sensitivity.csv"))?;
            f.write_all(report.to_csv().as_bytes())?;
        }
        Ok(report)
    }

    /// The seed's KAT synthetic data with multiplicative target noise.
    pub fn noisy_synthetic(&self, seed: u64, level: f64) -> crate::Result<Dataset> {
        let sd = self.kat_synthetic(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, TAG_NOISE));
        let u: Vec<Vec<f64>> = sd
            .samples()
            .iter()
            .map(|s| s.target.iter().map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mut i = 0;
        Ok(sd.map_targets(|s| {
            let row = &u[i];
            i += 1;
            s.target.iter().zip(row).map(|(y, u)| y * (1.0 + level * u)).collect()
        })?)
    }

    /// Trains and evaluates a single cell.
    pub fn cell(&self, scenario: &ScenarioSpec, seed: u64) -> HResult<CellReport> {
        self.run_cell(scenario, seed)
            .map(|o| o.report)
            .map_err(cell_err(scenario, seed))
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// CRPSS of every PPF cell against the median CRPS of O-LM.
fn fill_crpss(cells: &mut [CellReport]) {
    let base: Vec<f64> = cells
        .iter()
        .filter(|c| c.scenario.data == DataKind::O && c.scenario.model == ModelKind::Lm && c.scenario.quantile.is_none())
        .filter_map(|c| c.metrics.crps)
        .collect();
    if base.is_empty() {
        return;
    }
    let b = percentile(&base, 0.5);
    for c in cells.iter_mut() {
        if let Some(crps) = c.metrics.crps {
            c.metrics.crpss = crate::diagnostics::crpss(crps, Some(b)).ok();
        }
    }
}

fn summarize(sc: &ScenarioSpec, cells: &[CellReport]) -> ScenarioSummary {
    let mine: Vec<&CellReport> = cells.iter().filter(|c| c.scenario == *sc).collect();
    let col = |f: &dyn Fn(&CellReport) -> Option<f64>| -> Option<Spread> {
        let v: Vec<f64> = mine.iter().filter_map(|c| f(c)).collect();
        Spread::of(&v)
    };
    let nan = Spread {
        median: f64::NAN,
        q1: f64::NAN,
        q3: f64::NAN,
    };
    ScenarioSummary {
        scenario: *sc,
        seeds: mine.len(),
        rmse: col(&|c| c.metrics.rmse).unwrap_or(nan),
        mape: col(&|c| c.metrics.mape).unwrap_or(nan),
        smape: col(&|c| c.metrics.smape).unwrap_or(nan),
        train_loss: col(&|c| Some(c.metrics.train_loss)).unwrap_or(nan),
        test_loss: col(&|c| Some(c.metrics.test_loss)).unwrap_or(nan),
        overfit_gap: col(&|c| Some(c.metrics.overfit_gap)).unwrap_or(nan),
        mean_grad_noise: col(&|c| c.mean_grad_noise),
        manifold_pred_minus_syn: col(&|c| c.manifold_pred_minus_syn),
        crps: col(&|c| c.metrics.crps),
        winkler: col(&|c| c.metrics.winkler),
        crpss: col(&|c| c.metrics.crpss),
    }
}

pub fn run_matrix(cfg: &ExperimentConfig) -> HResult<ReportBundle> {
    Experiment::new(cfg.clone())?.run_matrix()
}

pub fn sensitivity_noise(cfg: &ExperimentConfig) -> HResult<SensitivityReport> {
    Experiment::new(cfg.clone())?.sensitivity(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task, scenarios: &[&str]) -> ExperimentConfig {
        let mut sim = SimulatorConfig::for_task(task, 3);
        sim.train_len = Some(if task == Task::Um { 60 } else { 200 });
        sim.test_len = Some(30);
        let mut cfg = ExperimentConfig::new(scenarios.iter().map(|s| s.parse().unwrap()).collect(), vec![1, 0], sim);
        cfg.train.iterations = 40;
        cfg.train.grad_noise_every = Some(10);
        cfg.augmentation.kat = Some(50);
        cfg.augmentation.da1 = Some(20);
        cfg.augmentation.da2 = Some(20);
        cfg
    }

    #[test]
    fn matrix_counts_and_order() {
        let mut cfg = small(Task::Um, &["O-LM[UM]", "KAT-LM[UM]", "DA2-LM[UM]"]);
        cfg.threads = Some(2);
        let b = run_matrix(&cfg).unwrap();
        assert_eq!(b.cells.len(), 6);
        let order: Vec<(String, u64)> = b.cells.iter().map(|c| (c.scenario.to_string(), c.seed)).collect();
        assert_eq!(order[0], ("KAT-LM[UM]".to_string(), 0));
        assert_eq!(order[1], ("KAT-LM[UM]".to_string(), 1));
        assert_eq!(order[5], ("DA2-LM[UM]".to_string(), 1));
        let kat = &b.cells[0];
        assert_eq!(kat.train_size, 110);
        assert!(kat.mean_grad_noise.is_some());
        assert!(kat.manifold_pred_minus_syn.is_some());
        assert_eq!(b.calibration.len(), 2);
        assert!(b.kkt.is_some());
        assert_eq!(b.summary.len(), 3);
    }

    #[test]
    fn zero_noise_reproduces_base_run() {
        let mut cfg = small(Task::Um, &["KAT-LM[UM]", "O-LM[UM]"]);
        cfg.seeds = vec![5];
        cfg.noise_levels = vec![0.0, 0.03];
        let exp = Experiment::new(cfg).unwrap();
        let b = exp.run_matrix().unwrap();
        let s = exp.sensitivity(Some(&b)).unwrap();
        let kat = b.cells.iter().find(|c| c.scenario.data == DataKind::Kat).unwrap();
        assert_eq!(s.rows[0].kat_rmse[0].to_bits(), kat.metrics.rmse.unwrap().to_bits());
        let o = b.cells.iter().find(|c| c.scenario.data == DataKind::O).unwrap();
        assert_eq!(s.baseline_rmse[0], o.metrics.rmse.unwrap());
        // without a bundle the baseline is retrained identically
        let s2 = exp.sensitivity(None).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn ppf_cell_trains_three_quantiles() {
        let mut cfg = small(Task::Ppf, &["O-SM[PPF]"]);
        cfg.seeds = vec![0];
        cfg.train.iterations = 5;
        let b = run_matrix(&cfg).unwrap();
        let m = &b.cells[0].metrics;
        assert!(m.crps.is_some() && m.winkler.is_some() && m.pinball.is_some());
        assert!(b.cells[0].manifold_pred_minus_syn.is_none());
    }

    #[test]
    fn cell_errors_carry_context() {
        let mut cfg = small(Task::Um, &["DA1-LM[UM]"]);
        cfg.train.step_size = f64::NAN;
        let err = run_matrix(&cfg).unwrap_err();
        match err {
            HarnessError::Cell { scenario, seed, .. } => {
                assert_eq!(scenario, "DA1-LM[UM]");
                assert_eq!(seed, 0);
            }
            e => panic!("{e}"),
        }
    }
}
