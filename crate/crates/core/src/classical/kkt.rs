//! Inverse optimization of the load model by complementarity branch-and-bound.
//!
//! Given observed price/consumption pairs and known `(c, E, L, U)`, find the
//! shape `w` whose optimal allocations best match the observations in least
//! squares, with the allocations tied to `w` through the KKT conditions of
//! the inner problem. Every period carries two complementarity pairs (lower
//! and upper bound). The branching decides each pair as "multiplier zero" or
//! "constraint active", and one decision is shared by all samples, so a tree
//! over `P` periods has `2^(2P)` leaves.
//!
//! At a leaf, bound periods are pinned at `L` or `U` and free periods follow
//! stationarity, `y_it = (w_t - p_it - lambda_i) / c`. Eliminating `lambda_i`
//! with the energy constraint leaves an ordinary least-squares problem in `w`
//! with a closed-form solution. Internal nodes leave undecided periods
//! unconstrained (subject only to the energy total), which yields a valid
//! lower bound for every leaf below them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dispatch::Envelope;
use super::CalibrationError;

/// Primal and dual feasibility tolerance at leaves.
pub const FEASIBILITY_TOL: f64 = 1e-7;

/// Largest period count accepted by the exact solver.
pub const MAX_KKT_PERIODS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodStatus {
    Free,
    Lower,
    Upper,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KktStats {
    pub nodes: usize,
    pub leaves: usize,
    pub feasible_leaves: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktSolution {
    /// Sum of squared residuals over all samples and periods.
    pub objective: f64,
    /// Fitted shape, shifted to zero mean.
    pub shape: Vec<f64>,
    pub pattern: Vec<PeriodStatus>,
    pub stats: KktStats,
}

/// Observations and known parameters of one inverse problem.
pub struct KktProblem<'a> {
    pub prices: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
    pub curvature: f64,
    pub envelope: Envelope,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Pair {
    Open,
    Zero,
    Active,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum NodeStatus {
    Fixed(PeriodStatus),
    Free,
    Relaxed,
    Infeasible,
}

fn status(lower: Pair, upper: Pair, env: &Envelope) -> NodeStatus {
    match (lower, upper) {
        (Pair::Active, Pair::Active) if env.lower < env.upper => NodeStatus::Infeasible,
        (Pair::Active, _) => NodeStatus::Fixed(PeriodStatus::Lower),
        (_, Pair::Active) => NodeStatus::Fixed(PeriodStatus::Upper),
        (Pair::Zero, Pair::Zero) => NodeStatus::Free,
        _ => NodeStatus::Relaxed,
    }
}

impl KktProblem<'_> {
    fn periods(&self) -> usize {
        self.prices.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<(), CalibrationError> {
        let p = self.periods();
        if self.prices.is_empty() {
            return Err(CalibrationError::EmptyDataset);
        }
        if p > MAX_KKT_PERIODS {
            return Err(CalibrationError::TooManyPeriods {
                periods: p,
                max: MAX_KKT_PERIODS,
            });
        }
        if self.prices.len() != self.targets.len() {
            return Err(CalibrationError::DimensionMismatch {
                expected: self.prices.len(),
                found: self.targets.len(),
            });
        }
        for row in self.prices.iter().chain(self.targets) {
            if row.len() != p {
                return Err(CalibrationError::DimensionMismatch {
                    expected: p,
                    found: row.len(),
                });
            }
        }
        if !(self.curvature > 0.0) || !self.envelope.feasible(p) {
            return Err(CalibrationError::InvalidModel(
                "inverse calibration needs c > 0 and P*L <= E <= P*U".into(),
            ));
        }
        Ok(())
    }

    fn bound_value(&self, s: PeriodStatus) -> f64 {
        match s {
            PeriodStatus::Lower => self.envelope.lower,
            PeriodStatus::Upper => self.envelope.upper,
            PeriodStatus::Free => unreachable!(),
        }
    }

    fn fixed_cost(&self, fixed: &[(usize, f64)]) -> f64 {
        self.targets
            .iter()
            .map(|y| fixed.iter().map(|&(t, v)| (v - y[t]).powi(2)).sum::<f64>())
            .sum()
    }

    /// Exact leaf: returns `(objective, shape)` or `None` when the KKT point
    /// violates a bound.
    fn leaf(&self, pattern: &[PeriodStatus]) -> Option<(f64, Vec<f64>)> {
        let p = self.periods();
        let n = self.prices.len() as f64;
        let c = self.curvature;
        let env = &self.envelope;
        let free: Vec<usize> = (0..p).filter(|&t| pattern[t] == PeriodStatus::Free).collect();
        let fixed: Vec<(usize, f64)> = (0..p)
            .filter(|&t| pattern[t] != PeriodStatus::Free)
            .map(|t| (t, self.bound_value(pattern[t])))
            .collect();
        let e_free = env.energy - fixed.iter().map(|&(_, v)| v).sum::<f64>();
        let mut objective = self.fixed_cost(&fixed);
        let mut shape = vec![0.0; p];
        let mut lambdas = vec![0.0; self.prices.len()];
        let f = free.len();
        if f == 0 {
            if e_free.abs() > FEASIBILITY_TOL * env.energy.abs().max(1.0) {
                return None;
            }
        } else {
            let ff = f as f64;
            let level = e_free / ff;
            // r_i = y_i,F - level + proj(p_i,F)/c ; optimum proj(w)/c = proj(mean r)
            let r: Vec<Vec<f64>> = self
                .prices
                .iter()
                .zip(self.targets)
                .map(|(pi, yi)| {
                    let pm = free.iter().map(|&t| pi[t]).sum::<f64>() / ff;
                    free.iter().map(|&t| yi[t] - level + (pi[t] - pm) / c).collect()
                })
                .collect();
            let mut rbar = vec![0.0; f];
            for ri in &r {
                for (a, b) in rbar.iter_mut().zip(ri) {
                    *a += b / n;
                }
            }
            let rm = rbar.iter().sum::<f64>() / ff;
            let target: Vec<f64> = rbar.iter().map(|v| v - rm).collect();
            objective += r
                .iter()
                .map(|ri| ri.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>();
            for (k, &t) in free.iter().enumerate() {
                shape[t] = c * target[k];
            }
            for (i, pi) in self.prices.iter().enumerate() {
                let psum: f64 = free.iter().map(|&t| pi[t]).sum();
                lambdas[i] = (-psum - c * e_free) / ff;
                for &t in &free {
                    let y = (shape[t] - pi[t] - lambdas[i]) / c;
                    if y < env.lower - FEASIBILITY_TOL || y > env.upper + FEASIBILITY_TOL {
                        return None;
                    }
                }
            }
        }
        // dual feasibility on pinned periods: choose w_t at the tightest value
        for &(t, _) in &fixed {
            let it = self.prices.iter().zip(&lambdas);
            shape[t] = match pattern[t] {
                PeriodStatus::Lower => it.map(|(pi, l)| c * env.lower + pi[t] + l).fold(f64::INFINITY, f64::min),
                _ => it.map(|(pi, l)| c * env.upper + pi[t] + l).fold(f64::NEG_INFINITY, f64::max),
            };
        }
        let mean = shape.iter().sum::<f64>() / p as f64;
        shape.iter_mut().for_each(|v| *v -= mean);
        Some((objective, shape))
    }

    /// Lower bound over all leaves below a node whose relaxed periods are
    /// only tied by the energy total.
    fn relaxed_bound(&self, statuses: &[NodeStatus]) -> f64 {
        let c = self.curvature;
        let p = self.periods();
        let free: Vec<usize> = (0..p).filter(|&t| statuses[t] == NodeStatus::Free).collect();
        let relaxed: Vec<usize> = (0..p).filter(|&t| statuses[t] == NodeStatus::Relaxed).collect();
        let fixed: Vec<(usize, f64)> = (0..p)
            .filter_map(|t| match statuses[t] {
                NodeStatus::Fixed(s) => Some((t, self.bound_value(s))),
                _ => None,
            })
            .collect();
        let slack = self.envelope.energy - fixed.iter().map(|&(_, v)| v).sum::<f64>();
        let f = free.len();
        let rows = f + 1;
        let sr = (relaxed.len() as f64).sqrt();
        // residual = M_w w + m_l lambda - d_i
        let mut mw = DMatrix::<f64>::zeros(rows, f);
        let mut ml = DVector::<f64>::zeros(rows);
        for k in 0..f {
            mw[(k, k)] = 1.0 / c;
            ml[k] = -1.0 / c;
            mw[(f, k)] = 1.0 / (c * sr);
        }
        ml[f] = -(f as f64) / (c * sr);
        let q = if f > 0 {
            let mm = ml.dot(&ml);
            DMatrix::<f64>::identity(rows, rows) - &ml * ml.transpose() / mm
        } else {
            DMatrix::<f64>::identity(rows, rows)
        };
        let a = &q * &mw;
        let n = self.prices.len();
        let mut zs = Vec::with_capacity(n);
        let mut zbar = DVector::<f64>::zeros(rows);
        for (pi, yi) in self.prices.iter().zip(self.targets) {
            let mut d = DVector::<f64>::zeros(rows);
            for (k, &t) in free.iter().enumerate() {
                d[k] = yi[t] + pi[t] / c;
            }
            let ry: f64 = relaxed.iter().map(|&t| yi[t]).sum();
            let pf: f64 = free.iter().map(|&t| pi[t]).sum();
            d[f] = (slack - ry + pf / c) / sr;
            let z = &q * d;
            zbar += &z / n as f64;
            zs.push(z);
        }
        let spread: f64 = zs.iter().map(|z| (z - &zbar).norm_squared()).sum();
        let fit = if f > 0 {
            let svd = a.clone().svd(true, true);
            match svd.solve(&zbar, 1e-12) {
                Ok(w) => (&a * w - &zbar).norm_squared(),
                Err(_) => zbar.norm_squared(),
            }
        } else {
            zbar.norm_squared()
        };
        let lb = self.fixed_cost(&fixed) + spread + n as f64 * fit;
        // keep the bound conservative against roundoff
        lb * (1.0 - 1e-9) - 1e-12
    }
}

struct Search<'p, 'a> {
    prob: &'p KktProblem<'a>,
    pairs: Vec<Pair>,
    best: Option<(f64, Vec<f64>, Vec<PeriodStatus>)>,
    stats: KktStats,
}

impl Search<'_, '_> {
    fn statuses(&self) -> Vec<NodeStatus> {
        let env = &self.prob.envelope;
        self.pairs.chunks(2).map(|pr| status(pr[0], pr[1], env)).collect()
    }

    fn visit(&mut self, depth: usize) {
        self.stats.nodes += 1;
        let st = self.statuses();
        if st.contains(&NodeStatus::Infeasible) {
            return;
        }
        if !st.contains(&NodeStatus::Relaxed) {
            // every period decided; remaining open pairs can only be zero
            let pattern: Vec<PeriodStatus> = st
                .iter()
                .map(|s| match s {
                    NodeStatus::Fixed(p) => *p,
                    _ => PeriodStatus::Free,
                })
                .collect();
            self.stats.leaves += 1;
            if let Some((obj, shape)) = self.prob.leaf(&pattern) {
                self.stats.feasible_leaves += 1;
                if self.best.as_ref().is_none_or(|b| obj < b.0) {
                    self.best = Some((obj, shape, pattern));
                }
            }
            return;
        }
        if let Some((inc, _, _)) = &self.best {
            if self.prob.relaxed_bound(&st) > *inc {
                self.stats.pruned += 1;
                return;
            }
        }
        let next = (depth..self.pairs.len()).find(|&k| self.pairs[k] == Pair::Open && {
            // skip pairs that cannot change the period status
            let t = k / 2;
            matches!(st[t], NodeStatus::Relaxed)
        });
        let Some(k) = next else { return };
        for choice in [Pair::Zero, Pair::Active] {
            self.pairs[k] = choice;
            self.visit(k + 1);
        }
        self.pairs[k] = Pair::Open;
    }
}

/// Globally optimal shape over the complementarity tree.
pub fn solve_inverse_kkt(prob: &KktProblem<'_>) -> Result<KktSolution, CalibrationError> {
    prob.validate()?;
    let mut search = Search {
        prob,
        pairs: vec![Pair::Open; 2 * prob.periods()],
        best: None,
        stats: KktStats::default(),
    };
    search.visit(0);
    let stats = search.stats;
    let (objective, shape, pattern) = search.best.ok_or(CalibrationError::InfeasibleAtAllLeaves)?;
    Ok(KktSolution {
        objective,
        shape,
        pattern,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::dispatch::allocate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instance(rng: &mut ChaCha8Rng, p: usize, n: usize, c: f64, w: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Envelope) {
        let env = Envelope {
            energy: 5.0 * p as f64,
            lower: 0.0,
            upper: 10.0,
        };
        let prices: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.gen_range(20.0..24.0)).collect()).collect();
        let targets = prices.iter().map(|pi| allocate(pi, w, c, &env).0).collect();
        (prices, targets, env)
    }

    #[test]
    fn interior_data_is_a_single_free_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = [1.0, -2.0, 0.5, 0.5];
        let (prices, targets, envelope) = instance(&mut rng, 4, 6, 2.0, &w);
        let prob = KktProblem {
            prices: &prices,
            targets: &targets,
            curvature: 2.0,
            envelope,
        };
        let sol = solve_inverse_kkt(&prob).unwrap();
        assert!(sol.pattern.iter().all(|&s| s == PeriodStatus::Free));
        assert!(sol.objective < 1e-18);
        for (a, b) in sol.shape.iter().zip(&w) {
            assert!((a - b).abs() < 1e-9);
        }
        // the all-free leaf alone gives the same fit
        let (obj, _) = prob.leaf(&[PeriodStatus::Free; 4]).unwrap();
        assert_eq!(obj, sol.objective);
    }

    #[test]
    fn relaxation_bounds_every_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = [8.0, -8.0, 0.0];
        let (prices, mut targets, envelope) = instance(&mut rng, 3, 5, 1.0, &w);
        for y in targets.iter_mut() {
            for v in y.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let prob = KktProblem {
            prices: &prices,
            targets: &targets,
            curvature: 1.0,
            envelope,
        };
        let all = [PeriodStatus::Free, PeriodStatus::Lower, PeriodStatus::Upper];
        let relaxed = [NodeStatus::Relaxed; 3];
        let lb_root = prob.relaxed_bound(&relaxed);
        for a in all {
            for b in all {
                for c in all {
                    if let Some((obj, _)) = prob.leaf(&[a, b, c]) {
                        assert!(lb_root <= obj + 1e-12);
                        let partial = [
                            match a {
                                PeriodStatus::Free => NodeStatus::Free,
                                s => NodeStatus::Fixed(s),
                            },
                            NodeStatus::Relaxed,
                            NodeStatus::Relaxed,
                        ];
                        assert!(prob.relaxed_bound(&partial) <= obj + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn too_many_periods() {
        let prices = vec![vec![0.0; 13]];
        let prob = KktProblem {
            prices: &prices,
            targets: &prices,
            curvature: 1.0,
            envelope: Envelope {
                energy: 13.0,
                lower: 0.0,
                upper: 2.0,
            },
        };
        assert!(matches!(
            solve_inverse_kkt(&prob),
            Err(CalibrationError::TooManyPeriods { .. })
        ));
    }
}
