//! Fixtures shared by the pipeline benchmarks.

use kat_core::classical::dispatch::{allocate, Envelope};
use kat_core::harness::{simulate, SimulatorConfig, Task};
use kat_core::{Dataset, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Simulated Case 1 training set of `days` days.
pub fn case1_train(days: usize) -> Dataset {
    let mut cfg = SimulatorConfig::for_task(Task::Um, 0);
    cfg.train_len = Some(days);
    cfg.test_len = Some(1);
    simulate(&cfg).expect("simulator defaults are valid").train
}

/// Dispatch observations over `periods` periods with mild noise.
pub fn dispatch_instance(periods: usize, samples: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Envelope) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = Envelope {
        energy: 5.0 * periods as f64,
        lower: 0.0,
        upper: 10.0,
    };
    let w: Vec<f64> = (0..periods).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let prices: Vec<Vec<f64>> = (0..samples)
        .map(|_| (0..periods).map(|_| rng.gen_range(20.0..30.0)).collect())
        .collect();
    let targets = prices
        .iter()
        .map(|p| allocate(p, &w, 1.0, &env).0.iter().map(|v| v + rng.gen_range(-0.2..0.2)).collect())
        .collect();
    (prices, targets, env)
}

/// Random regression samples for network benchmarks.
pub fn random_samples(n: usize, input: usize, output: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Sample::historical(
                (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..output).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
        })
        .collect()
}
