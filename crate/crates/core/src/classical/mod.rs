//! Classical models `g_k(x; w_k)` and their calibration against historical
//! data: closed-form least squares, BFGS, particle swarm, and exact inverse
//! optimization for the price-responsive load model.

mod affine;
pub mod bfgs;
pub mod dispatch;
pub mod forest;
pub mod kernel_ridge;
pub mod kkt;
pub mod pso;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use bfgs::BfgsOptions;
use dispatch::Envelope;
pub use forest::Tree;
pub use kkt::{solve_inverse_kkt, KktProblem, KktSolution, KktStats, PeriodStatus, MAX_KKT_PERIODS};
use pso::PsoOptions;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("calibration needs a nonempty dataset")]
    EmptyDataset,
    #[error("method {method} cannot calibrate a {kind} model")]
    IncompatibleMethod { method: CalibrationMethod, kind: &'static str },
    #[error("calibration objective is not finite")]
    NonFiniteObjective,
    #[error("no leaf of the complementarity tree is feasible")]
    InfeasibleAtAllLeaves,
    #[error("{periods} periods exceed the exact solver limit of {max}")]
    TooManyPeriods { periods: usize, max: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("singular linear system")]
    Singular,
}

impl CalibrationError {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::NonFiniteObjective | Self::InfeasibleAtAllLeaves | Self::Singular
        )
    }
}

type Result<T> = std::result::Result<T, CalibrationError>;

fn default_gamma() -> f64 {
    10.0
}

fn default_ridge() -> f64 {
    0.1
}

/// Model family and hyperparameters. Serialized with a `kind` tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassicalModelKind {
    Affine,
    KernelRidge {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_ridge")]
        ridge: f64,
        /// Evenly strided subset of the training rows used as support.
        #[serde(default)]
        max_points: Option<usize>,
    },
    RandomForest {
        trees: usize,
        max_depth: usize,
        min_leaf: usize,
        #[serde(default)]
        max_features: Option<usize>,
    },
    /// Features are per-period prices, targets the per-period consumption.
    DispatchLoad {
        /// Initial guess for the calibrated methods; held fixed by the
        /// inverse-KKT route.
        curvature: f64,
        energy: f64,
        upper: f64,
        #[serde(default)]
        lower: f64,
        #[serde(default)]
        ramp: Option<f64>,
        /// Initial shape guess; empty means derive it from the data.
        #[serde(default)]
        shape: Vec<f64>,
    },
    /// Predicts a fixed vector. Calibrating it against constant targets is
    /// the sphere objective, which makes it handy for optimizer tests.
    Constant { dim: usize },
}

impl ClassicalModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Affine => "affine",
            Self::KernelRidge { .. } => "kernel_ridge",
            Self::RandomForest { .. } => "random_forest",
            Self::DispatchLoad { .. } => "dispatch_load",
            Self::Constant { .. } => "constant",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CalibrationError::InvalidModel(m.into()));
        match *self {
            Self::KernelRidge { gamma, ridge, .. } if !(gamma > 0.0) || !(ridge >= 0.0) => {
                bad("kernel ridge needs gamma > 0 and ridge >= 0")
            }
            Self::RandomForest { trees, .. } if trees == 0 => bad("random forest needs at least one tree"),
            Self::DispatchLoad {
                curvature,
                energy,
                upper,
                lower,
                ramp,
                ..
            } => {
                if !(upper > 0.0) || !(curvature >= 0.0) || lower > upper || ramp.is_some_and(|r| !(r > 0.0)) {
                    return bad("dispatch model needs U > 0, L <= U, R > 0 and c >= 0");
                }
                if !energy.is_finite() {
                    return bad("dispatch energy must be finite");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    #[serde(flatten)]
    pub kind: ClassicalModelKind,
    #[serde(default)]
    pub seed: u64,
}

impl ModelDescriptor {
    pub fn new(kind: ClassicalModelKind, seed: u64) -> Self {
        Self { kind, seed }
    }
}

/// Fitted parameters `w*`, tagged by `form`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum FittedParams {
    Affine {
        /// One row per output.
        weights: Vec<Vec<f64>>,
        intercept: Vec<f64>,
    },
    KernelRidge {
        offset: Vec<f64>,
        scale: Vec<f64>,
        target_mean: Vec<f64>,
        /// Scaled support points.
        support: Vec<Vec<f64>>,
        /// One row per support point, one column per output.
        coef: Vec<Vec<f64>>,
    },
    RandomForest {
        trees: Vec<Tree>,
    },
    DispatchLoad {
        curvature: f64,
        shape: Vec<f64>,
    },
    Constant {
        value: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    #[serde(flatten)]
    pub descriptor: ModelDescriptor,
    pub input_dim: usize,
    pub output_dim: usize,
    pub w_star: FittedParams,
    /// Mean squared error on the calibration data.
    pub e_star: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    QuasiNewton,
    Pso,
    ClosedForm,
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::QuasiNewton => "bfgs",
            Self::Pso => "pso",
            Self::ClosedForm => "closed-form",
        })
    }
}

impl FromStr for CalibrationMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bfgs" | "quasi-newton" => Ok(Self::QuasiNewton),
            "pso" => Ok(Self::Pso),
            "closed-form" => Ok(Self::ClosedForm),
            _ => Err(format!("unknown calibration method `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CalibrationOptions {
    pub bfgs: BfgsOptions,
    /// The swarm seed is taken from the model descriptor.
    pub pso: PsoOptions,
}

pub fn predict(model: &CalibratedModel, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim {
        return Err(CalibrationError::DimensionMismatch {
            expected: model.input_dim,
            found: x.len(),
        });
    }
    Ok(match (&model.w_star, &model.descriptor.kind) {
        (FittedParams::Affine { weights, intercept }, _) => affine::apply(weights, intercept, x),
        (
            FittedParams::KernelRidge {
                offset,
                scale,
                target_mean,
                support,
                coef,
            },
            ClassicalModelKind::KernelRidge { gamma, .. },
        ) => {
            let s = kernel_ridge::Scaling {
                offset: offset.clone(),
                scale: scale.clone(),
            };
            let mut out = target_mean.clone();
            kernel_ridge::predict(*gamma, support, coef, &s.apply(x), &mut out);
            out
        }
        (FittedParams::RandomForest { trees }, _) => forest::predict(trees, x),
        (
            FittedParams::DispatchLoad { curvature, shape },
            ClassicalModelKind::DispatchLoad {
                energy,
                upper,
                lower,
                ramp,
                ..
            },
        ) => {
            let env = Envelope {
                energy: *energy,
                lower: *lower,
                upper: *upper,
            };
            dispatch_predict(x, shape, *curvature, &env, *ramp)
        }
        (FittedParams::Constant { value }, _) => value.clone(),
        _ => return Err(CalibrationError::InvalidModel("fitted form does not match model kind".into())),
    })
}

fn dispatch_predict(prices: &[f64], shape: &[f64], c: f64, env: &Envelope, ramp: Option<f64>) -> Vec<f64> {
    let (mut u, _) = dispatch::allocate(prices, shape, c, env);
    if let Some(r) = ramp {
        dispatch::clip_ramp(&mut u, r);
    }
    u
}

/// Mean squared error of `model` over every target component of `data`.
pub fn mse(model: &CalibratedModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(CalibrationError::EmptyDataset);
    }
    let mut sum = 0.0;
    for s in data.samples() {
        let p = predict(model, &s.features)?;
        if p.len() != s.target.len() {
            return Err(CalibrationError::DimensionMismatch {
                expected: s.target.len(),
                found: p.len(),
            });
        }
        sum += p.iter().zip(&s.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(sum / (data.len() * data.target_dim()) as f64)
}

pub fn calibrate(desc: &ModelDescriptor, hd: &Dataset, method: CalibrationMethod) -> Result<CalibratedModel> {
    calibrate_with(desc, hd, method, &CalibrationOptions::default())
}

pub fn calibrate_with(
    desc: &ModelDescriptor,
    hd: &Dataset,
    method: CalibrationMethod,
    opts: &CalibrationOptions,
) -> Result<CalibratedModel> {
    desc.kind.validate()?;
    if hd.is_empty() {
        return Err(CalibrationError::EmptyDataset);
    }
    let xs: Vec<&[f64]> = hd.samples().iter().map(|s| s.features.as_slice()).collect();
    let ys: Vec<&[f64]> = hd.samples().iter().map(|s| s.target.as_slice()).collect();
    let w_star = match (&desc.kind, method) {
        (
            ClassicalModelKind::RandomForest {
                trees,
                max_depth,
                min_leaf,
                max_features,
            },
            _,
        ) => {
            let d = hd.feature_dim();
            let cfg = forest::ForestConfig {
                trees: *trees,
                max_depth: *max_depth,
                min_leaf: *min_leaf,
                max_features: max_features.unwrap_or(d.div_ceil(3)),
                seed: desc.seed,
            };
            FittedParams::RandomForest {
                trees: forest::fit(&xs, &ys, &cfg),
            }
        }
        (ClassicalModelKind::Affine, CalibrationMethod::ClosedForm) => {
            let (weights, intercept) = affine::least_squares(&xs, &ys)?;
            FittedParams::Affine { weights, intercept }
        }
        (ClassicalModelKind::Constant { dim }, CalibrationMethod::ClosedForm) => {
            check_dim(*dim, hd.target_dim())?;
            let n = ys.len() as f64;
            let value = (0..*dim).map(|k| ys.iter().map(|y| y[k]).sum::<f64>() / n).collect();
            FittedParams::Constant { value }
        }
        (ClassicalModelKind::KernelRidge { gamma, ridge, max_points }, CalibrationMethod::ClosedForm) => {
            let kr = KrSetup::new(&xs, &ys, *max_points);
            let coef = kernel_ridge::solve(*gamma, *ridge, &kr.support, &kr.centered)?;
            kr.finish(coef)
        }
        (ClassicalModelKind::DispatchLoad { .. }, CalibrationMethod::ClosedForm) => {
            return Err(CalibrationError::IncompatibleMethod {
                method,
                kind: desc.kind.name(),
            })
        }
        (_, CalibrationMethod::QuasiNewton | CalibrationMethod::Pso) => {
            let p = Parametric::new(&desc.kind, &xs, &ys)?;
            let theta = match method {
                CalibrationMethod::QuasiNewton => {
                    if !(p.objective)(&p.guess).is_finite() {
                        return Err(CalibrationError::NonFiniteObjective);
                    }
                    let r = match &p.gradient {
                        Some(g) => bfgs::minimize(&p.objective, g, p.guess.clone(), opts.bfgs),
                        None => {
                            let mut f = &p.objective;
                            bfgs::minimize(
                                &p.objective,
                                |x: &[f64]| bfgs::numeric_gradient(&mut f, x),
                                p.guess.clone(),
                                opts.bfgs,
                            )
                        }
                    };
                    r.x
                }
                _ => {
                    let po = PsoOptions {
                        seed: desc.seed,
                        ..opts.pso
                    };
                    pso::minimize(&p.objective, &p.bounds, std::slice::from_ref(&p.guess), po).x
                }
            };
            if !(p.objective)(&theta).is_finite() {
                return Err(CalibrationError::NonFiniteObjective);
            }
            (p.finish)(&theta)
        }
    };
    finalize(desc.clone(), hd, w_star)
}

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(CalibrationError::DimensionMismatch { expected, found })
    }
}

fn finalize(descriptor: ModelDescriptor, hd: &Dataset, w_star: FittedParams) -> Result<CalibratedModel> {
    let mut model = CalibratedModel {
        descriptor,
        input_dim: hd.feature_dim(),
        output_dim: hd.target_dim(),
        w_star,
        e_star: 0.0,
    };
    let e = mse(&model, hd)?;
    if !e.is_finite() {
        return Err(CalibrationError::NonFiniteObjective);
    }
    model.e_star = e;
    Ok(model)
}

/// Fits a dispatch model's shape by exact inverse optimization with its
/// curvature, energy and bounds held at the descriptor values. Ramp limits
/// are not part of the inverse problem.
pub fn calibrate_inverse_kkt(desc: &ModelDescriptor, hd: &Dataset) -> Result<(CalibratedModel, KktSolution)> {
    desc.kind.validate()?;
    let ClassicalModelKind::DispatchLoad {
        curvature,
        energy,
        upper,
        lower,
        ..
    } = desc.kind
    else {
        return Err(CalibrationError::IncompatibleMethod {
            method: CalibrationMethod::ClosedForm,
            kind: desc.kind.name(),
        });
    };
    if hd.is_empty() {
        return Err(CalibrationError::EmptyDataset);
    }
    check_dim(hd.feature_dim(), hd.target_dim())?;
    let prices: Vec<Vec<f64>> = hd.samples().iter().map(|s| s.features.clone()).collect();
    let targets: Vec<Vec<f64>> = hd.samples().iter().map(|s| s.target.clone()).collect();
    let sol = solve_inverse_kkt(&KktProblem {
        prices: &prices,
        targets: &targets,
        curvature,
        envelope: Envelope { energy, lower, upper },
    })?;
    let model = finalize(
        desc.clone(),
        hd,
        FittedParams::DispatchLoad {
            curvature,
            shape: sol.shape.clone(),
        },
    )?;
    Ok((model, sol))
}

struct KrSetup {
    scaling: kernel_ridge::Scaling,
    target_mean: Vec<f64>,
    support: Vec<Vec<f64>>,
    centered: Vec<Vec<f64>>,
}

impl KrSetup {
    fn new(xs: &[&[f64]], ys: &[&[f64]], max_points: Option<usize>) -> Self {
        let n = xs.len();
        let stride = max_points.map_or(1, |m| n.div_ceil(m.max(1)));
        let rows: Vec<usize> = (0..n).step_by(stride).collect();
        let sx: Vec<&[f64]> = rows.iter().map(|&i| xs[i]).collect();
        let scaling = kernel_ridge::Scaling::fit(&sx);
        let out = ys[0].len();
        let m = rows.len() as f64;
        let target_mean: Vec<f64> = (0..out).map(|k| rows.iter().map(|&i| ys[i][k]).sum::<f64>() / m).collect();
        let support = rows.iter().map(|&i| scaling.apply(xs[i])).collect();
        let centered = rows
            .iter()
            .map(|&i| ys[i].iter().zip(&target_mean).map(|(y, mu)| y - mu).collect())
            .collect();
        Self {
            scaling,
            target_mean,
            support,
            centered,
        }
    }

    fn finish(&self, coef: Vec<Vec<f64>>) -> FittedParams {
        FittedParams::KernelRidge {
            offset: self.scaling.offset.clone(),
            scale: self.scaling.scale.clone(),
            target_mean: self.target_mean.clone(),
            support: self.support.clone(),
            coef,
        }
    }
}

type Objective<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;
type Gradient<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + 'a>;

/// A model kind viewed as a flat parameter vector with an MSE-style
/// objective, for the iterative calibrators.
struct Parametric<'a> {
    guess: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    objective: Objective<'a>,
    gradient: Option<Gradient<'a>>,
    finish: Box<dyn Fn(&[f64]) -> FittedParams + 'a>,
}

fn column_range(rows: &[&[f64]], k: usize) -> (f64, f64) {
    rows.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[k]), hi.max(r[k])))
}

impl<'a> Parametric<'a> {
    fn new(kind: &'a ClassicalModelKind, xs: &'a [&'a [f64]], ys: &'a [&'a [f64]]) -> Result<Self> {
        let n = xs.len();
        let d = xs[0].len();
        let o = ys[0].len();
        let norm = (n * o) as f64;
        Ok(match kind {
            ClassicalModelKind::Constant { dim } => {
                check_dim(*dim, o)?;
                let bounds: Vec<(f64, f64)> = (0..o)
                    .map(|k| {
                        let (lo, hi) = column_range(ys, k);
                        let pad = hi - lo + 1.0;
                        (lo - pad, hi + pad)
                    })
                    .collect();
                Self {
                    guess: bounds_mid(&bounds),
                    bounds,
                    objective: Box::new(move |w: &[f64]| {
                        ys.iter()
                            .map(|y| y.iter().zip(w).map(|(a, b)| (b - a).powi(2)).sum::<f64>())
                            .sum::<f64>()
                            / norm
                    }),
                    gradient: Some(Box::new(move |w: &[f64]| {
                        let mut g = vec![0.0; w.len()];
                        for y in ys {
                            for k in 0..w.len() {
                                g[k] += 2.0 * (w[k] - y[k]) / norm;
                            }
                        }
                        g
                    })),
                    finish: Box::new(|w: &[f64]| FittedParams::Constant { value: w.to_vec() }),
                }
            }
            ClassicalModelKind::Affine => {
                let residuals = move |t: &[f64], mut visit: Box<dyn FnMut(usize, usize, f64) + '_>| {
                    for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
                        for k in 0..o {
                            let row = &t[k * d..(k + 1) * d];
                            let p = t[o * d + k] + row.iter().zip(*x).map(|(a, b)| a * b).sum::<f64>();
                            visit(i, k, p - y[k]);
                        }
                    }
                };
                let mut guess = vec![0.0; o * d + o];
                let mut bounds = vec![(0.0, 0.0); o * d + o];
                for k in 0..o {
                    let (ylo, yhi) = column_range(ys, k);
                    let yspan = (yhi - ylo).max(1e-9);
                    guess[o * d + k] = ys.iter().map(|y| y[k]).sum::<f64>() / n as f64;
                    bounds[o * d + k] = (ylo - 4.0 * yspan, yhi + 4.0 * yspan);
                    for j in 0..d {
                        let (xlo, xhi) = column_range(xs, j);
                        let w = 4.0 * yspan / (xhi - xlo).max(1e-9);
                        bounds[k * d + j] = (-w, w);
                    }
                }
                Self {
                    guess,
                    bounds,
                    objective: Box::new(move |t: &[f64]| {
                        let mut s = 0.0;
                        residuals(t, Box::new(|_, _, r| s += r * r));
                        s / norm
                    }),
                    gradient: Some(Box::new(move |t: &[f64]| {
                        let mut g = vec![0.0; t.len()];
                        residuals(
                            t,
                            Box::new(|i, k, r| {
                                let c = 2.0 * r / norm;
                                for j in 0..d {
                                    g[k * d + j] += c * xs[i][j];
                                }
                                g[o * d + k] += c;
                            }),
                        );
                        g
                    })),
                    finish: Box::new(move |t: &[f64]| FittedParams::Affine {
                        weights: (0..o).map(|k| t[k * d..(k + 1) * d].to_vec()).collect(),
                        intercept: t[o * d..].to_vec(),
                    }),
                }
            }
            ClassicalModelKind::KernelRidge {
                gamma,
                ridge,
                max_points,
            } => {
                let kr = KrSetup::new(xs, ys, *max_points);
                let m = kr.support.len();
                let k = kernel_ridge::gram(*gamma, &kr.support);
                let y = nalgebra::DMatrix::from_fn(m, o, |i, j| kr.centered[i][j]);
                let ridge = *ridge;
                let coef_of = move |t: &[f64]| nalgebra::DMatrix::from_row_slice(m, o, t);
                let ymax = kr.centered.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
                let k2 = k.clone();
                let y2 = y.clone();
                let scale = m as f64;
                Self {
                    guess: vec![0.0; m * o],
                    bounds: vec![(-4.0 * ymax - 1.0, 4.0 * ymax + 1.0); m * o],
                    // (1/m) [ |K a - y|^2 + ridge a'K a ], minimized by (K + ridge I) a = y
                    objective: Box::new(move |t: &[f64]| {
                        let a = coef_of(t);
                        let ka = &k * &a;
                        ((&ka - &y).norm_squared() + ridge * a.dot(&ka)) / scale
                    }),
                    gradient: Some(Box::new(move |t: &[f64]| {
                        let a = coef_of(t);
                        let inner = &k2 * &a + &a * ridge - &y2;
                        let g = &k2 * inner * (2.0 / scale);
                        let mut out = vec![0.0; m * o];
                        for i in 0..m {
                            for j in 0..o {
                                out[i * o + j] = g[(i, j)];
                            }
                        }
                        out
                    })),
                    finish: Box::new(move |t: &[f64]| kr.finish(t.chunks(o).map(<[f64]>::to_vec).collect())),
                }
            }
            ClassicalModelKind::DispatchLoad {
                curvature,
                energy,
                upper,
                lower,
                ramp,
                shape,
            } => {
                check_dim(d, o)?;
                let env = Envelope {
                    energy: *energy,
                    lower: *lower,
                    upper: *upper,
                };
                if !env.feasible(d) {
                    return Err(CalibrationError::InvalidModel("dispatch energy outside [P*L, P*U]".into()));
                }
                let c0 = if *curvature > 0.0 { *curvature } else { 1.0 };
                let guess_shape: Vec<f64> = if shape.len() == d {
                    shape.clone()
                } else {
                    // stationarity with lambda = 0: w_t = p_t + c u_t on average
                    (0..d)
                        .map(|t| xs.iter().zip(ys).map(|(x, y)| x[t] + c0 * y[t]).sum::<f64>() / n as f64)
                        .collect()
                };
                let pspread = (0..d)
                    .map(|t| {
                        let (lo, hi) = column_range(xs, t);
                        hi - lo
                    })
                    .fold(0.0f64, f64::max);
                let half = c0 * (upper - lower) + pspread;
                let mut guess = vec![c0];
                guess.extend(&guess_shape);
                let mut bounds = vec![(c0 / 4.0, 4.0 * c0)];
                bounds.extend(guess_shape.iter().map(|g| (g - half, g + half)));
                let ramp = *ramp;
                Self {
                    guess,
                    bounds,
                    objective: Box::new(move |t: &[f64]| {
                        if !(t[0] > 0.0) || t.iter().any(|v| !v.is_finite()) {
                            return f64::INFINITY;
                        }
                        xs.iter()
                            .zip(ys)
                            .map(|(x, y)| {
                                dispatch_predict(x, &t[1..], t[0], &env, ramp)
                                    .iter()
                                    .zip(*y)
                                    .map(|(a, b)| (a - b).powi(2))
                                    .sum::<f64>()
                            })
                            .sum::<f64>()
                            / norm
                    }),
                    gradient: None,
                    finish: Box::new(|t: &[f64]| {
                        let mean = t[1..].iter().sum::<f64>() / (t.len() - 1) as f64;
                        FittedParams::DispatchLoad {
                            curvature: t[0],
                            shape: t[1..].iter().map(|v| v - mean).collect(),
                        }
                    }),
                }
            }
            ClassicalModelKind::RandomForest { .. } => unreachable!("forests use their own fit"),
        })
    }
}

fn bounds_mid(b: &[(f64, f64)]) -> Vec<f64> {
    b.iter().map(|(l, h)| 0.5 * (l + h)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Sample;

    fn data(rows: Vec<(Vec<f64>, Vec<f64>)>) -> Dataset {
        Dataset::from_samples(rows.into_iter().map(|(x, y)| Sample::historical(x, y)).collect()).unwrap()
    }

    #[test]
    fn affine_prediction_by_hand() {
        let m = CalibratedModel {
            descriptor: ModelDescriptor::new(ClassicalModelKind::Affine, 0),
            input_dim: 1,
            output_dim: 1,
            w_star: FittedParams::Affine {
                weights: vec![vec![2.0]],
                intercept: vec![1.0],
            },
            e_star: 0.0,
        };
        assert_eq!(predict(&m, &[5.0]).unwrap(), vec![11.0]);
        assert!(matches!(
            predict(&m, &[1.0, 2.0]),
            Err(CalibrationError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn affine_fits_exact_line_every_method() {
        let hd = data((0..20).map(|i| (vec![i as f64 * 0.5], vec![2.0 * i as f64 * 0.5 + 1.0])).collect());
        let desc = ModelDescriptor::new(ClassicalModelKind::Affine, 0);
        for method in [CalibrationMethod::ClosedForm, CalibrationMethod::QuasiNewton] {
            let m = calibrate(&desc, &hd, method).unwrap();
            let FittedParams::Affine { weights, intercept } = &m.w_star else {
                panic!()
            };
            assert!((weights[0][0] - 2.0).abs() < 1e-6, "{method}");
            assert!((intercept[0] - 1.0).abs() < 1e-6, "{method}");
            assert!(m.e_star < 1e-8);
        }
        let m = calibrate(&desc, &hd, CalibrationMethod::Pso).unwrap();
        assert!(m.e_star < 1e-4, "{}", m.e_star);
    }

    #[test]
    fn e_star_recomputes() {
        let hd = data((0..15).map(|i| (vec![i as f64, (i * i) as f64 * 0.1], vec![(i as f64).sin()])).collect());
        for kind in [
            ClassicalModelKind::Affine,
            ClassicalModelKind::KernelRidge {
                gamma: 2.0,
                ridge: 0.1,
                max_points: None,
            },
            ClassicalModelKind::RandomForest {
                trees: 4,
                max_depth: 3,
                min_leaf: 2,
                max_features: None,
            },
        ] {
            let m = calibrate(&ModelDescriptor::new(kind, 1), &hd, CalibrationMethod::ClosedForm).unwrap();
            let e = mse(&m, &hd).unwrap();
            assert!((e - m.e_star).abs() <= 1e-12 * e.max(1e-300));
        }
    }

    #[test]
    fn sphere_via_pso() {
        let w0 = vec![3.0, -1.5, 0.2];
        let hd = data((0..5).map(|i| (vec![i as f64], w0.clone())).collect());
        let m = calibrate(
            &ModelDescriptor::new(ClassicalModelKind::Constant { dim: 3 }, 11),
            &hd,
            CalibrationMethod::Pso,
        )
        .unwrap();
        let FittedParams::Constant { value } = &m.w_star else { panic!() };
        for (a, b) in value.iter().zip(&w0) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn kernel_ridge_interpolates_without_ridge() {
        let hd = data(
            (0..8)
                .map(|i| {
                    let x = i as f64 / 7.0;
                    (vec![x], vec![(3.0 * x).cos()])
                })
                .collect(),
        );
        let kind = ClassicalModelKind::KernelRidge {
            gamma: 10.0,
            ridge: 0.0,
            max_points: None,
        };
        let m = calibrate(&ModelDescriptor::new(kind.clone(), 0), &hd, CalibrationMethod::ClosedForm).unwrap();
        for s in hd.samples() {
            assert!((predict(&m, &s.features).unwrap()[0] - s.target[0]).abs() < 1e-6);
        }
        // BFGS on the same objective lands on the same fit
        let mut kind_r = kind;
        if let ClassicalModelKind::KernelRidge { ridge, .. } = &mut kind_r {
            *ridge = 0.5;
        }
        let cf = calibrate(&ModelDescriptor::new(kind_r.clone(), 0), &hd, CalibrationMethod::ClosedForm).unwrap();
        let qn = calibrate(&ModelDescriptor::new(kind_r, 0), &hd, CalibrationMethod::QuasiNewton).unwrap();
        assert!((cf.e_star - qn.e_star).abs() < 1e-6);
    }

    #[test]
    fn method_compatibility() {
        let hd = data(vec![(vec![1.0, 2.0], vec![5.0, 5.0])]);
        let kind = ClassicalModelKind::DispatchLoad {
            curvature: 1.0,
            energy: 10.0,
            upper: 6.0,
            lower: 0.0,
            ramp: None,
            shape: vec![],
        };
        let err = calibrate(&ModelDescriptor::new(kind, 0), &hd, CalibrationMethod::ClosedForm).unwrap_err();
        assert!(matches!(err, CalibrationError::IncompatibleMethod { .. }));
        let empty = hd.empty_like();
        assert!(matches!(
            calibrate(&ModelDescriptor::new(ClassicalModelKind::Affine, 0), &empty, CalibrationMethod::ClosedForm),
            Err(CalibrationError::EmptyDataset)
        ));
    }

    #[test]
    fn dispatch_bfgs_recovers_generating_model() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let env = Envelope {
            energy: 24.0,
            lower: 0.0,
            upper: 8.0,
        };
        let w = [3.0, -1.0, 0.0, -2.0];
        let rows = (0..30)
            .map(|_| {
                let p: Vec<f64> = (0..4).map(|_| rng.gen_range(10.0..14.0)).collect();
                let (u, _) = dispatch::allocate(&p, &w, 1.5, &env);
                (p, u)
            })
            .collect();
        let hd = data(rows);
        let kind = ClassicalModelKind::DispatchLoad {
            curvature: 1.0,
            energy: 24.0,
            upper: 8.0,
            lower: 0.0,
            ramp: None,
            shape: vec![],
        };
        let m = calibrate(&ModelDescriptor::new(kind, 0), &hd, CalibrationMethod::QuasiNewton).unwrap();
        assert!(m.e_star < 1e-8, "{}", m.e_star);
    }

    #[test]
    fn descriptor_json_shape() {
        let desc = ModelDescriptor::new(
            ClassicalModelKind::RandomForest {
                trees: 50,
                max_depth: 8,
                min_leaf: 3,
                max_features: None,
            },
            7,
        );
        let v = serde_json::to_value(&desc).unwrap();
        assert_eq!(v["kind"], "random_forest");
        assert_eq!(v["seed"], 7);
        let back: ModelDescriptor = serde_json::from_value(v).unwrap();
        assert_eq!(back, desc);
        let kr: ModelDescriptor = serde_json::from_str(r#"{"kind":"kernel_ridge","seed":1}"#).unwrap();
        assert_eq!(
            kr.kind,
            ClassicalModelKind::KernelRidge {
                gamma: 10.0,
                ridge: 0.1,
                max_points: None
            }
        );
    }
}
