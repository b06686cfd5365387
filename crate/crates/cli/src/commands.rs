use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use kat_core::augmentation::{augment_da1, augment_da2, compute_weights, generate_sites, synthesize, AggregationConfig, SiteGenConfig};
use kat_core::classical::{calibrate_inverse_kkt, calibrate_with, CalibratedModel, CalibrationMethod, CalibrationOptions, ClassicalModelKind, ModelDescriptor};
use kat_core::dataset::sidecar_path;
use kat_core::diagnostics::{
    evaluate_point, evaluate_quantiles, gradient_noise, landscape_projection, manifold_errors, MetricsReport, TrainedModel,
};
use kat_core::harness::{simulate as run_simulator, Experiment, ExperimentConfig, SimulatorConfig, Task};
use kat_core::neural::{read_params, write_params};
use kat_core::training::{draw_minibatch, draw_uniform, DiagnosticFlags, Sampling, TrainConfig};
use kat_core::{Dataset, LossKind, NetworkSpec, Normalization};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{
    AugmentArgs, AugmentMode, CalibrateArgs, Case, DataArgs, DiagnoseArgs, DiagnoseKind, EvaluateArgs, ExperimentArgs,
    Method, ModelArgs, SimulateArgs, TrainArgs,
};

/// Config error marker for failures detected by the CLI itself.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    use kat_core::classical::CalibrationError;
    use kat_core::diagnostics::DiagnosticsError;
    use kat_core::training::TrainingError;
    let numerical = e.chain().any(|c| {
        if let Some(k) = c.downcast_ref::<kat_core::Error>() {
            k.is_numerical()
        } else if let Some(k) = c.downcast_ref::<CalibrationError>() {
            k.is_numerical()
        } else if let Some(k) = c.downcast_ref::<TrainingError>() {
            matches!(k, TrainingError::NonFiniteLoss { .. })
        } else if let Some(k) = c.downcast_ref::<DiagnosticsError>() {
            matches!(k, DiagnosticsError::DegenerateCovariance)
        } else {
            false
        }
    });
    if numerical {
        3
    } else {
        2
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    emit_text(&text, out)
}

fn emit_text(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_data(path: &Path, args: &DataArgs) -> Result<Dataset> {
    let data = if args.targets.is_empty() {
        if !sidecar_path(path).exists() {
            return Err(usage(format!(
                "{} has no sidecar; name the target columns with --targets",
                path.display()
            )));
        }
        Dataset::load_with_sidecar(path)
    } else {
        Dataset::load_csv(path, &args.targets)
    };
    data.with_context(|| format!("loading {}", path.display()))
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg: SimulatorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimulatorConfig::default(),
    };
    cfg.task = match a.case {
        Case::UserModel => Task::Um,
        Case::PriceForecast => Task::Ppf,
    };
    cfg.seed = a.seed;
    let sim = run_simulator(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    sim.train.write_csv(a.out.join("train.csv"))?;
    sim.test.write_csv(a.out.join("test.csv"))?;
    sim.oracle.reference.write_csv(a.out.join("reference.csv"))?;
    emit_json(&cfg, Some(&a.out.join("simulator.json")))?;
    eprintln!(
        "wrote {} train, {} test and {} reference samples to {}",
        sim.train.len(),
        sim.test.len(),
        sim.oracle.reference.len(),
        a.out.display()
    );
    Ok(())
}

pub fn calibrate(a: CalibrateArgs) -> Result<()> {
    let models: Vec<ModelDescriptor> = read_json(&a.models)?;
    if models.is_empty() {
        return Err(usage("model library is empty"));
    }
    let hd = load_data(&a.data, &a.data_args)?;
    let opts = CalibrationOptions::default();
    let mut out = Vec::with_capacity(models.len());
    for (i, desc) in models.iter().enumerate() {
        let fitted = match a.method {
            Method::KktBnb => {
                let (m, sol) = calibrate_inverse_kkt(desc, &hd)?;
                eprintln!(
                    "model {i}: {} nodes, {} leaves, {} pruned",
                    sol.stats.nodes, sol.stats.leaves, sol.stats.pruned
                );
                m
            }
            Method::Bfgs => calibrate_with(desc, &hd, CalibrationMethod::QuasiNewton, &opts)?,
            Method::Pso => calibrate_with(desc, &hd, CalibrationMethod::Pso, &opts)?,
            Method::Auto => {
                let method = match desc.kind {
                    ClassicalModelKind::DispatchLoad { .. } => CalibrationMethod::Pso,
                    ClassicalModelKind::Constant { .. } => CalibrationMethod::QuasiNewton,
                    _ => CalibrationMethod::ClosedForm,
                };
                calibrate_with(desc, &hd, method, &opts)?
            }
        };
        eprintln!("model {i} ({}): e* = {:.6e}", desc.kind.name(), fitted.e_star);
        out.push(fitted);
    }
    emit_json(&out, a.out.as_deref())
}

pub fn augment(a: AugmentArgs) -> Result<()> {
    let hd = load_data(&a.data, &a.data_args)?;
    if a.count == 0 {
        return Err(usage("--count must be >= 1"));
    }
    let sd = match a.mode {
        AugmentMode::Kat => {
            let path = a.calibrated.as_ref().ok_or_else(|| usage("--mode kat needs --calibrated"))?;
            let models: Vec<CalibratedModel> = read_json(path)?;
            let errors: Vec<f64> = models.iter().map(|m| m.e_star).collect();
            let weights = compute_weights(&errors, &AggregationConfig { alpha: a.alpha, beta: a.beta })?;
            eprintln!("weights {:?}", weights.gamma);
            let sites = generate_sites(
                &hd,
                &SiteGenConfig {
                    count: a.count,
                    margin: a.margin,
                    sparse_bias: a.sparse_bias,
                    seed: a.seed,
                },
            )?;
            synthesize(&models, &weights, &sites)?
        }
        AugmentMode::Da1 => augment_da1(&hd, a.count, a.seed)?,
        AugmentMode::Da2 => augment_da2(&hd, a.count, a.seed)?,
    };
    // keep the historical column names
    let sd = Dataset::new(sd.into_samples(), hd.feature_names().to_vec(), hd.target_names().to_vec())?;
    sd.write_csv(&a.out)?;
    eprintln!("wrote {} synthetic samples to {}", sd.len(), a.out.display());
    Ok(())
}

fn parse_loss(s: &str) -> Result<LossKind> {
    s.parse::<LossKind>().map_err(|e| usage(format!("--loss: {e}")))
}

fn default_norm_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".norm.json");
    PathBuf::from(s)
}

pub fn train(a: TrainArgs) -> Result<()> {
    let spec: NetworkSpec = read_json(&a.net)?;
    let hd = load_data(&a.data, &a.data_args)?;
    let mut data = match &a.synthetic {
        Some(p) => {
            let sd = load_data(p, &a.data_args)?;
            Dataset::merge(&hd, &sd)?
        }
        None => hd,
    };
    let norm = a.normalize.then(|| Normalization::fit(&data));
    if let Some(n) = &norm {
        data = n.apply(&data);
    }
    let cfg = TrainConfig {
        batch_size: a.batch,
        step_size: a.step,
        iterations: a.iters,
        eta_min: a.eta_min,
        eta_max: a.eta_max,
        horizon: a.horizon,
        loss: match &a.loss {
            Some(s) => parse_loss(s)?,
            None => spec.loss,
        },
        sampling: if a.uniform { Sampling::Uniform } else { Sampling::Dynamic },
        seed: a.seed,
        ..TrainConfig::default()
    };
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    let trace = kat_core::training::train(&spec, &data, &cfg, DiagnosticFlags { every: a.grad_noise_every })?;
    write_params(&a.out, &spec, &trace.params)?;
    if let Some(p) = &a.trace {
        trace.write_csv(p)?;
    }
    if let Some(n) = &norm {
        let p = a.norm_out.clone().unwrap_or_else(|| default_norm_path(&a.out));
        emit_json(n, Some(&p))?;
    }
    eprintln!(
        "trained {} iterations, final batch loss {:.6e}",
        trace.len(),
        trace.loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn load_models(m: &ModelArgs) -> Result<(NetworkSpec, Vec<TrainedModel>)> {
    let spec: NetworkSpec = read_json(&m.net)?;
    let norm: Option<Normalization> = m.norm.as_deref().map(read_json).transpose()?;
    if m.params.is_empty() {
        return Err(usage("need at least one --params file"));
    }
    let models = m
        .params
        .iter()
        .map(|p| {
            let params = read_params(p, &spec).with_context(|| format!("loading {}", p.display()))?;
            Ok(TrainedModel::new(&spec, params, norm.clone())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((spec, models))
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let (spec, models) = load_models(&a.model)?;
    let test = load_data(&a.data, &a.data_args)?;
    let train = match &a.train {
        Some(p) => load_data(p, &a.data_args)?,
        None => test.clone(),
    };
    let baseline = match &a.baseline {
        Some(p) => {
            let v: serde_json::Value = read_json(p)?;
            Some(
                v.get("crps")
                    .and_then(serde_json::Value::as_f64)
                    .ok_or_else(|| usage(format!("{} has no numeric `crps` field", p.display())))?,
            )
        }
        None => None,
    };
    let report: MetricsReport = match models.as_slice() {
        [m] => evaluate_point(m, &train, &test, spec.loss)?,
        [a25, a50, a75] => evaluate_quantiles([a25, a50, a75], &train, &test, baseline)?,
        _ => return Err(usage("pass one --params file, or three for the 0.25/0.5/0.75 quantiles")),
    };
    emit_json(&report, a.out.as_deref())
}

pub fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = read_json(&a.config)?;
    if let Some(k) = a.iters {
        cfg.train.iterations = k;
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    cfg.output_dir = Some(a.out.clone());
    let exp = Experiment::new(cfg)?;
    let bundle = exp.run_matrix()?;
    for s in &bundle.summary {
        eprintln!(
            "{}: median RMSE {:.4} [{:.4}, {:.4}]",
            s.scenario, s.rmse.median, s.rmse.q1, s.rmse.q3
        );
    }
    if a.sensitivity {
        let rep = exp.sensitivity(Some(&bundle))?;
        for r in &rep.rows {
            eprintln!("noise {}: KAT median RMSE {:.4} (gap {:+.4})", r.level, r.kat_median, r.gap);
        }
    }
    eprintln!("wrote report bundle to {}", a.out.display());
    Ok(())
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str, kind: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("--kind {kind} needs {flag}")))
}

fn single(models: Vec<TrainedModel>) -> Result<TrainedModel> {
    let mut models = models;
    if models.len() != 1 {
        return Err(usage("diagnostics take exactly one --params file"));
    }
    Ok(models.remove(0))
}

pub fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let (spec, models) = load_models(&a.model)?;
    let model = single(models)?;
    let out = a.out.as_deref();
    match a.kind {
        DiagnoseKind::GradNoise => {
            let hd = load_data(need(&a.data, "--data", "grad-noise")?, &a.data_args)?;
            let mut data = match &a.synthetic {
                Some(p) => Dataset::merge(&hd, &load_data(p, &a.data_args)?)?,
                None => hd,
            };
            if let Some(n) = &model.normalization {
                data = n.apply(&data);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let batch = if data.n_synthetic() > 0 {
                draw_minibatch(&data, a.eta, a.batch, &mut rng)?
            } else {
                draw_uniform(&data, a.batch, &mut rng)?
            };
            let gn = gradient_noise(&spec, &model.params, &batch, &data, spec.loss)?;
            emit_json(
                &serde_json::json!({
                    "grad_noise_norm": gn.norm,
                    "batch_loss": gn.batch_loss,
                    "full_loss": gn.full_loss,
                    "batch_historical": batch.m1,
                    "batch_synthetic": batch.m2,
                }),
                out,
            )
        }
        DiagnoseKind::Manifold => {
            let sd = load_data(need(&a.synthetic, "--synthetic", "manifold")?, &a.data_args)?;
            let sd = sd.with_samples(sd.samples().iter().map(|s| kat_core::Sample::synthetic(s.features.clone(), s.target.clone())).collect())?;
            let cfg: SimulatorConfig = read_json(need(&a.simulator, "--simulator", "manifold")?)?;
            let sim = run_simulator(&cfg)?;
            if !sim.oracle.has_truth() {
                return Err(usage("the simulator has no pointwise ground truth for this task"));
            }
            let report = manifold_errors(&model, &sd, Some(&sim.oracle))?;
            emit_json(&report, out)
        }
        DiagnoseKind::Landscape => {
            let empirical = load_data(need(&a.data, "--data", "landscape")?, &a.data_args)?;
            let ideal = load_data(need(&a.reference, "--reference", "landscape")?, &a.data_args)?;
            let grid = landscape_projection(&empirical, &ideal, &model, spec.loss, a.resolution)?;
            emit_text(&grid.to_csv(), out)
        }
        DiagnoseKind::Overfit => {
            let train = load_data(need(&a.train, "--train", "overfit")?, &a.data_args)?;
            let test = load_data(need(&a.data, "--data", "overfit")?, &a.data_args)?;
            let (tr, te) = (model.loss(&train, spec.loss)?, model.loss(&test, spec.loss)?);
            emit_json(
                &serde_json::json!({ "train_loss": tr, "test_loss": te, "overfit_gap": te - tr }),
                out,
            )
        }
    }
}
