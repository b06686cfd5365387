//! Global-best particle swarm with constriction-style coefficients and box
//! constraints enforced by clamping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsoOptions {
    pub swarm: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PsoOptions {
    fn default() -> Self {
        Self {
            swarm: 40,
            inertia: 0.729,
            cognitive: 1.49445,
            social: 1.49445,
            iterations: 300,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PsoResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
}

/// Minimizes `f` over the box `bounds`. Positions in `warm_start` replace the
/// first random particles.
pub fn minimize<F>(mut f: F, bounds: &[(f64, f64)], warm_start: &[Vec<f64>], opts: PsoOptions) -> PsoResult
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = bounds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let clamp = |v: f64, (lo, hi): (f64, f64)| v.clamp(lo, hi);
    let eval = |f: &mut F, x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut pos: Vec<Vec<f64>> = (0..opts.swarm)
        .map(|_| bounds.iter().map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..=hi) } else { lo }).collect())
        .collect();
    for (p, w) in pos.iter_mut().zip(warm_start) {
        *p = w.iter().zip(bounds).map(|(&v, &b)| clamp(v, b)).collect();
    }
    let mut vel: Vec<Vec<f64>> = (0..opts.swarm)
        .map(|_| {
            bounds
                .iter()
                .map(|&(lo, hi)| {
                    let r = 0.1 * (hi - lo);
                    if r > 0.0 {
                        rng.gen_range(-r..=r)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut evaluations = 0;
    let mut best_pos = pos.clone();
    let mut best_val: Vec<f64> = pos
        .iter()
        .map(|p| {
            evaluations += 1;
            eval(&mut f, p)
        })
        .collect();
    let mut g = argmin(&best_val);
    let mut g_pos = best_pos[g].clone();
    let mut g_val = best_val[g];
    for _ in 0..opts.iterations {
        for i in 0..opts.swarm {
            for d in 0..dim {
                let (lo, hi) = bounds[d];
                let r1: f64 = rng.gen();
                let r2: f64 = rng.gen();
                let vmax = hi - lo;
                let v = opts.inertia * vel[i][d]
                    + opts.cognitive * r1 * (best_pos[i][d] - pos[i][d])
                    + opts.social * r2 * (g_pos[d] - pos[i][d]);
                vel[i][d] = v.clamp(-vmax, vmax);
                pos[i][d] = clamp(pos[i][d] + vel[i][d], bounds[d]);
            }
            let v = eval(&mut f, &pos[i]);
            evaluations += 1;
            if v < best_val[i] {
                best_val[i] = v;
                best_pos[i].clone_from(&pos[i]);
            }
        }
        g = argmin(&best_val);
        if best_val[g] < g_val {
            g_val = best_val[g];
            g_pos.clone_from(&best_pos[g]);
        }
    }
    PsoResult {
        x: g_pos,
        value: g_val,
        evaluations,
    }
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bv), (i, &x)| if x < bv { (i, x) } else { (bi, bv) })
        .0
}
