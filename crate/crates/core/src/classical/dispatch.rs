//! Inner allocation problem of the price-responsive load model:
//!
//! ```text
//! max  sum_t (w_t u_t - c/2 u_t^2) - sum_t p_t u_t
//! s.t. sum_t u_t = E,  L <= u_t <= U
//! ```
//!
//! For `c > 0` the optimum is `u_t = clamp((w_t - p_t - lambda) / c, L, U)`
//! with `lambda` the multiplier of the energy constraint. The total is a
//! nonincreasing piecewise-linear function of `lambda`, so it is solved
//! exactly by locating the right segment between sorted breakpoints.

/// Bounds and energy of one allocation problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub energy: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Envelope {
    pub fn feasible(&self, periods: usize) -> bool {
        let p = periods as f64;
        self.lower <= self.upper && p * self.lower <= self.energy + 1e-12 && self.energy <= p * self.upper + 1e-12
    }
}

fn total(a: &[f64], lambda: f64, c: f64, env: &Envelope) -> f64 {
    a.iter().map(|&ai| ((ai - lambda) / c).clamp(env.lower, env.upper)).sum()
}

/// Solves the allocation for prices `p` and shape `w`. Returns the profile
/// and the energy multiplier. The envelope must be feasible.
pub fn allocate(prices: &[f64], shape: &[f64], curvature: f64, env: &Envelope) -> (Vec<f64>, f64) {
    let a: Vec<f64> = shape.iter().zip(prices).map(|(w, p)| w - p).collect();
    if curvature <= 0.0 {
        return greedy(&a, env);
    }
    let c = curvature;
    let mut bps: Vec<f64> = a.iter().flat_map(|&ai| [ai - c * env.upper, ai - c * env.lower]).collect();
    bps.sort_by(|x, y| x.total_cmp(y));
    bps.dedup();
    // total(bps[0]) = P*U >= E >= P*L = total(bps[last]); find the segment.
    let (mut lo, mut hi) = (0usize, bps.len() - 1);
    let mut s_lo = total(&a, bps[lo], c, env);
    let mut s_hi = total(&a, bps[hi], c, env);
    let lambda = if env.energy >= s_lo {
        bps[lo]
    } else if env.energy <= s_hi {
        bps[hi]
    } else {
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let s = total(&a, bps[mid], c, env);
            if s >= env.energy {
                lo = mid;
                s_lo = s;
            } else {
                hi = mid;
                s_hi = s;
            }
        }
        if s_lo == s_hi {
            bps[lo]
        } else {
            bps[lo] + (s_lo - env.energy) / (s_lo - s_hi) * (bps[hi] - bps[lo])
        }
    };
    let u = a.iter().map(|&ai| ((ai - lambda) / c).clamp(env.lower, env.upper)).collect();
    (u, lambda)
}

/// Linear utility: fill periods in order of decreasing net value, splitting
/// ties evenly.
fn greedy(a: &[f64], env: &Envelope) -> (Vec<f64>, f64) {
    let n = a.len();
    let mut u = vec![env.lower; n];
    let mut remaining = env.energy - env.lower * n as f64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    let room = env.upper - env.lower;
    let mut lambda = order.first().map_or(0.0, |&i| a[i]);
    let mut k = 0;
    while k < n && remaining > 0.0 {
        let mut end = k + 1;
        while end < n && (a[order[end]] - a[order[k]]).abs() <= 1e-12 * a[order[k]].abs().max(1.0) {
            end += 1;
        }
        let group = &order[k..end];
        let share = (remaining / group.len() as f64).min(room);
        for &i in group {
            u[i] += share;
        }
        remaining -= share * group.len() as f64;
        lambda = a[order[k]];
        k = end;
    }
    (u, lambda)
}

/// Sequential ramp clip: each period moves at most `ramp` from the previous.
pub fn clip_ramp(u: &mut [f64], ramp: f64) {
    for t in 1..u.len() {
        let prev = u[t - 1];
        u[t] = u[t].clamp(prev - ramp, prev + ramp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ENV: Envelope = Envelope {
        energy: 120.0,
        lower: 0.0,
        upper: 10.0,
    };

    #[test]
    fn flat_prices_give_flat_profile() {
        let (u, _) = allocate(&[30.0; 24], &[0.0; 24], 0.5, &ENV);
        for v in &u {
            assert!((v - 5.0).abs() < 1e-12);
        }
        let (u, _) = allocate(&[30.0; 24], &[0.0; 24], 0.0, &ENV);
        assert!(u.iter().all(|v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn cheap_hours_are_filled_first_when_linear() {
        let mut p = vec![50.0; 24];
        for t in 0..12 {
            p[t] = 20.0;
        }
        let (u, _) = allocate(&p, &[0.0; 24], 0.0, &ENV);
        assert!(u[..12].iter().all(|&v| v == 10.0));
        assert!(u[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_clip() {
        let mut u = vec![0.0, 10.0, 0.0];
        clip_ramp(&mut u, 4.0);
        assert_eq!(u, vec![0.0, 4.0, 0.0]);
    }

    proptest! {
        #[test]
        fn kkt_conditions_hold(
            p in proptest::collection::vec(0.0f64..100.0, 2..25),
            c in 0.05f64..5.0,
            frac in 0.0f64..1.0,
            w_seed in 0.0f64..50.0,
        ) {
            let n = p.len();
            let env = Envelope { energy: 1.0 * n as f64 + frac * 8.0 * n as f64, lower: 1.0, upper: 9.0 };
            let w: Vec<f64> = (0..n).map(|t| w_seed * ((t as f64) * 0.7).sin()).collect();
            let (u, lambda) = allocate(&p, &w, c, &env);
            let s: f64 = u.iter().sum();
            prop_assert!((s - env.energy).abs() < 1e-8 * env.energy.max(1.0));
            for t in 0..n {
                prop_assert!(u[t] >= env.lower && u[t] <= env.upper);
                // stationarity with sign-consistent multipliers
                let g = w[t] - p[t] - lambda - c * u[t];
                if u[t] > env.lower + 1e-9 && u[t] < env.upper - 1e-9 {
                    prop_assert!(g.abs() < 1e-7 * (1.0 + lambda.abs()));
                } else if u[t] <= env.lower + 1e-9 {
                    prop_assert!(g <= 1e-7 * (1.0 + lambda.abs()));
                } else {
                    prop_assert!(g >= -1e-7 * (1.0 + lambda.abs()));
                }
            }
        }
    }
}
