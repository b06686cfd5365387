use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::Plan;
use super::{loss_grad, LossKind, NetworkSpec, NeuralError};
use crate::dataset::Sample;

/// Flat parameter vector, laid out layer by layer. Dense layers store their
/// weight matrix row-major (`outputs x inputs`) followed by the bias; recurrent
/// layers store `W_x` (`units x width`), `W_h` (`units x units`), then the bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub theta: Vec<f64>,
}

impl NetworkParams {
    pub fn new(theta: Vec<f64>) -> Self {
        Self { theta }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            theta: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }
}

/// Evaluation mode. Training mode draws dropout masks from the supplied source.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn rng(&mut self) -> Option<&mut dyn RngCore> {
        match self {
            Mode::Eval => None,
            Mode::Train(r) => Some(&mut **r),
        }
    }
}

enum Cache {
    Dense {
        input: Vec<f64>,
        z: Vec<f64>,
        a: Vec<f64>,
        prev_len: usize,
    },
    Recurrent {
        xs: Vec<f64>,
        hs: Vec<f64>,
        zs: Vec<f64>,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
}

/// A validated network spec with its parameter layout resolved.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    plans: Vec<Plan>,
    dim: usize,
    out_dim: usize,
}

impl Network {
    pub fn new(spec: &NetworkSpec) -> Result<Self, NeuralError> {
        let (plans, dim, out_dim) = spec.plan()?;
        Ok(Self {
            spec: spec.clone(),
            plans,
            dim,
            out_dim,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_dim(&self) -> usize {
        self.dim
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.out_dim
    }

    fn check(&self, params: &NetworkParams, x: &[f64]) -> Result<(), NeuralError> {
        if params.dim() != self.dim {
            return Err(NeuralError::DimensionMismatch {
                expected: self.dim,
                found: params.dim(),
            });
        }
        if x.len() != self.spec.input_dim {
            return Err(NeuralError::DimensionMismatch {
                expected: self.spec.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, params: &NetworkParams, x: &[f64], mut mode: Mode<'_>) -> Result<Vec<f64>, NeuralError> {
        self.check(params, x)?;
        Ok(self.run(&params.theta, x, mode.rng(), None))
    }

    /// Deterministic evaluation-mode prediction.
    pub fn predict(&self, params: &NetworkParams, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        self.forward(params, x, Mode::Eval)
    }

    fn run(
        &self,
        theta: &[f64],
        x: &[f64],
        mut rng: Option<&mut dyn RngCore>,
        mut caches: Option<&mut Vec<Cache>>,
    ) -> Vec<f64> {
        let mut cur = x.to_vec();
        for plan in &self.plans {
            match *plan {
                Plan::Dense {
                    offset,
                    inputs,
                    outputs,
                    act,
                    from_seq,
                } => {
                    let prev_len = cur.len();
                    let input = if from_seq {
                        cur[prev_len - inputs..].to_vec()
                    } else {
                        cur
                    };
                    let w = &theta[offset..offset + inputs * outputs];
                    let b = &theta[offset + inputs * outputs..offset + inputs * outputs + outputs];
                    let z: Vec<f64> = (0..outputs)
                        .map(|o| dot(&w[o * inputs..(o + 1) * inputs], &input) + b[o])
                        .collect();
                    let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
                    cur = a.clone();
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Dense {
                            input,
                            z,
                            a,
                            prev_len,
                        });
                    }
                }
                Plan::Recurrent {
                    offset,
                    width,
                    units,
                    steps,
                    act,
                } => {
                    let (wx, rest) = theta[offset..].split_at(units * width);
                    let (wh, rest) = rest.split_at(units * units);
                    let b = &rest[..units];
                    let mut hs = vec![0.0; (steps + 1) * units];
                    let mut zs = vec![0.0; steps * units];
                    for t in 0..steps {
                        let xt = &cur[t * width..(t + 1) * width];
                        let (done, todo) = hs.split_at_mut((t + 1) * units);
                        let hprev = &done[t * units..];
                        let hnext = &mut todo[..units];
                        for u in 0..units {
                            let z = dot(&wx[u * width..(u + 1) * width], xt)
                                + dot(&wh[u * units..(u + 1) * units], hprev)
                                + b[u];
                            zs[t * units + u] = z;
                            hnext[u] = act.apply(z);
                        }
                    }
                    let out = hs[units..].to_vec();
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Recurrent {
                            xs: std::mem::take(&mut cur),
                            hs,
                            zs,
                        });
                    }
                    cur = out;
                }
                Plan::Dropout { rate, len } => {
                    let mask = match rng.as_deref_mut() {
                        Some(r) if rate > 0.0 => {
                            let keep = 1.0 / (1.0 - rate);
                            let m: Vec<f64> = (0..len)
                                .map(|_| if r.gen::<f64>() < rate { 0.0 } else { keep })
                                .collect();
                            cur.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                            Some(m)
                        }
                        _ => None,
                    };
                    if let Some(c) = caches.as_deref_mut() {
                        c.push(Cache::Dropout { mask });
                    }
                }
            }
        }
        cur
    }

    /// Accumulates `d(output) -> d(theta)` for one sample into `grad`.
    fn backprop(&self, theta: &[f64], caches: Vec<Cache>, dout: Vec<f64>, grad: &mut [f64]) {
        let mut d = dout;
        for (idx, (plan, cache)) in self.plans.iter().zip(caches).enumerate().rev() {
            let need_input_grad = idx > 0;
            match (plan, cache) {
                (
                    &Plan::Dense {
                        offset,
                        inputs,
                        outputs,
                        act,
                        from_seq,
                    },
                    Cache::Dense { input, z, a, prev_len },
                ) => {
                    let dz: Vec<f64> = (0..outputs).map(|o| d[o] * act.derivative(z[o], a[o])).collect();
                    let (gw, gb) = grad[offset..offset + inputs * outputs + outputs].split_at_mut(inputs * outputs);
                    for o in 0..outputs {
                        if dz[o] != 0.0 {
                            axpy(dz[o], &input, &mut gw[o * inputs..(o + 1) * inputs]);
                        }
                        gb[o] += dz[o];
                    }
                    if need_input_grad {
                        let w = &theta[offset..offset + inputs * outputs];
                        let mut dx = vec![0.0; prev_len];
                        let base = if from_seq { prev_len - inputs } else { 0 };
                        for o in 0..outputs {
                            if dz[o] != 0.0 {
                                axpy(dz[o], &w[o * inputs..(o + 1) * inputs], &mut dx[base..base + inputs]);
                            }
                        }
                        d = dx;
                    }
                }
                (
                    &Plan::Recurrent {
                        offset,
                        width,
                        units,
                        steps,
                        act,
                    },
                    Cache::Recurrent { xs, hs, zs },
                ) => {
                    let wx = &theta[offset..offset + units * width];
                    let wh = &theta[offset + units * width..offset + units * width + units * units];
                    let g = &mut grad[offset..offset + units * width + units * units + units];
                    let (gwx, rest) = g.split_at_mut(units * width);
                    let (gwh, gb) = rest.split_at_mut(units * units);
                    let mut dxs = vec![0.0; if need_input_grad { steps * width } else { 0 }];
                    let mut dh_next = vec![0.0; units];
                    let mut dz = vec![0.0; units];
                    for t in (0..steps).rev() {
                        let hprev = &hs[t * units..(t + 1) * units];
                        let hcur = &hs[(t + 1) * units..(t + 2) * units];
                        let xt = &xs[t * width..(t + 1) * width];
                        for u in 0..units {
                            let dh = d[t * units + u] + dh_next[u];
                            dz[u] = dh * act.derivative(zs[t * units + u], hcur[u]);
                        }
                        dh_next.iter_mut().for_each(|v| *v = 0.0);
                        for u in 0..units {
                            let dzu = dz[u];
                            if dzu == 0.0 {
                                continue;
                            }
                            axpy(dzu, xt, &mut gwx[u * width..(u + 1) * width]);
                            axpy(dzu, hprev, &mut gwh[u * units..(u + 1) * units]);
                            gb[u] += dzu;
                            if need_input_grad {
                                axpy(dzu, &wx[u * width..(u + 1) * width], &mut dxs[t * width..(t + 1) * width]);
                            }
                            axpy(dzu, &wh[u * units..(u + 1) * units], &mut dh_next);
                        }
                    }
                    d = dxs;
                }
                (Plan::Dropout { .. }, Cache::Dropout { mask }) => {
                    if let Some(m) = mask {
                        d.iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    }
                }
                _ => unreachable!("cache does not match plan"),
            }
        }
    }

    /// Batch-mean loss and its gradient with respect to `theta`.
    pub fn loss_and_grad(
        &self,
        params: &NetworkParams,
        samples: &[Sample],
        kind: LossKind,
        mut mode: Mode<'_>,
    ) -> Result<(f64, Vec<f64>), NeuralError> {
        if samples.is_empty() {
            return Err(NeuralError::EmptyInput);
        }
        let mut grad = vec![0.0; self.dim];
        let scale = 1.0 / (samples.len() * self.out_dim) as f64;
        let mut total = 0.0;
        for s in samples {
            self.check(params, &s.features)?;
            if s.target.len() != self.out_dim {
                return Err(NeuralError::DimensionMismatch {
                    expected: self.out_dim,
                    found: s.target.len(),
                });
            }
            let mut caches = Vec::with_capacity(self.plans.len());
            let pred = self.run(&params.theta, &s.features, mode.rng(), Some(&mut caches));
            total += pred.iter().zip(&s.target).map(|(&p, &y)| kind.point(p, y)).sum::<f64>();
            let dout = loss_grad(kind, &pred, &s.target, scale);
            self.backprop(&params.theta, caches, dout, &mut grad);
        }
        Ok((total * scale, grad))
    }

    /// Gradient of the batch-mean loss with respect to `theta`.
    pub fn backward(
        &self,
        params: &NetworkParams,
        samples: &[Sample],
        kind: LossKind,
        mode: Mode<'_>,
    ) -> Result<Vec<f64>, NeuralError> {
        self.loss_and_grad(params, samples, kind, mode).map(|(_, g)| g)
    }

    /// Evaluation-mode batch-mean loss.
    pub fn mean_loss(&self, params: &NetworkParams, samples: &[Sample], kind: LossKind) -> Result<f64, NeuralError> {
        if samples.is_empty() {
            return Err(NeuralError::EmptyInput);
        }
        let mut total = 0.0;
        for s in samples {
            let pred = self.predict(params, &s.features)?;
            if pred.len() != s.target.len() {
                return Err(NeuralError::DimensionMismatch {
                    expected: pred.len(),
                    found: s.target.len(),
                });
            }
            total += pred.iter().zip(&s.target).map(|(&p, &y)| kind.point(p, y)).sum::<f64>();
        }
        Ok(total / (samples.len() * self.out_dim) as f64)
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> Result<NetworkParams, NeuralError> {
    let (plans, dim, _) = spec.plan()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0; dim];
    let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        slice.iter_mut().for_each(|v| *v = rng.gen_range(-limit..limit));
    };
    for plan in &plans {
        match *plan {
            Plan::Dense {
                offset,
                inputs,
                outputs,
                ..
            } => fill(&mut theta[offset..offset + inputs * outputs], inputs, outputs),
            Plan::Recurrent {
                offset, width, units, ..
            } => {
                fill(&mut theta[offset..offset + units * width], width, units);
                let wh = offset + units * width;
                fill(&mut theta[wh..wh + units * units], units, units);
            }
            Plan::Dropout { .. } => {}
        }
    }
    Ok(NetworkParams { theta })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Layer};

    fn dense(i: usize, o: usize, a: Activation) -> Layer {
        Layer::Dense {
            inputs: i,
            outputs: o,
            activation: a,
        }
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        let spec = NetworkSpec::mlp(&[24, 48, 24], Activation::Relu, None, LossKind::Mse);
        let a = init_params(&spec, 7).unwrap();
        assert_eq!(a, init_params(&spec, 7).unwrap());
        assert_eq!(a.dim(), 2376);
        for s in 0..10u64 {
            let x = init_params(&spec, 100 + 2 * s).unwrap();
            let y = init_params(&spec, 101 + 2 * s).unwrap();
            assert!(x.theta.iter().zip(&y.theta).any(|(p, q)| p != q));
        }
        // biases are zero, weights within the Glorot limit
        let limit = (6.0f64 / 72.0).sqrt();
        assert!(a.theta[..24 * 48].iter().all(|w| w.abs() <= limit));
        assert!(a.theta[24 * 48..24 * 48 + 48].iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_weights_output_bias() {
        let spec = NetworkSpec::new(3, vec![dense(3, 2, Activation::Identity)], LossKind::Mse);
        let net = Network::new(&spec).unwrap();
        let mut p = NetworkParams::zeros(net.param_dim());
        p.theta[6] = 1.5;
        p.theta[7] = -2.0;
        assert_eq!(net.predict(&p, &[9.0, -3.0, 0.1]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn single_relu_unit() {
        let spec = NetworkSpec::new(1, vec![dense(1, 1, Activation::Relu)], LossKind::Mse);
        let net = Network::new(&spec).unwrap();
        let p = NetworkParams::new(vec![2.0, -1.0]);
        assert_eq!(net.predict(&p, &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(net.predict(&p, &[0.2]).unwrap(), vec![0.0]);
    }

    #[test]
    fn eval_dropout_is_identity() {
        let with = NetworkSpec::mlp(&[4, 8, 3], Activation::Tanh, Some(0.5), LossKind::Mse);
        let without = with.without_dropout();
        let p = init_params(&with, 1).unwrap();
        let a = Network::new(&with).unwrap();
        let b = Network::new(&without).unwrap();
        let x = [0.3, -0.2, 1.0, 0.5];
        assert_eq!(a.predict(&p, &x).unwrap(), b.predict(&p, &x).unwrap());
    }

    #[test]
    fn train_dropout_scales_kept_units() {
        let spec = NetworkSpec::new(
            4,
            vec![Layer::Dropout { rate: 0.5 }, dense(4, 4, Activation::Identity)],
            LossKind::Mse,
        );
        let net = Network::new(&spec).unwrap();
        let mut theta = vec![0.0; 20];
        for i in 0..4 {
            theta[i * 4 + i] = 1.0;
        }
        let p = NetworkParams::new(theta);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = net.forward(&p, &[1.0, 1.0, 1.0, 1.0], Mode::Train(&mut rng)).unwrap();
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn linear_unit_gradient_closed_form() {
        let spec = NetworkSpec::new(2, vec![dense(2, 1, Activation::Identity)], LossKind::Mse);
        let net = Network::new(&spec).unwrap();
        let p = NetworkParams::new(vec![0.5, -1.0, 0.25]);
        let s = Sample::historical(vec![2.0, 3.0], vec![1.0]);
        let pred = 0.5 * 2.0 - 3.0 + 0.25;
        let g = net.backward(&p, &[s], LossKind::Mse, Mode::Eval).unwrap();
        let r = 2.0 * (pred - 1.0);
        assert_eq!(g, vec![r * 2.0, r * 3.0, r]);
    }

    #[test]
    fn pinball_gradient_sign() {
        let spec = NetworkSpec::new(1, vec![dense(1, 1, Activation::Identity)], LossKind::Mse);
        let net = Network::new(&spec).unwrap();
        let p = NetworkParams::new(vec![1.0, 0.0]);
        let q = 0.3;
        let kind = LossKind::Pinball { q };
        // under-prediction: y - pred > 0 -> d/dpred = -q
        let g = net.backward(&p, &[Sample::historical(vec![2.0], vec![5.0])], kind, Mode::Eval).unwrap();
        assert_eq!(g, vec![-q * 2.0, -q]);
        let g = net.backward(&p, &[Sample::historical(vec![2.0], vec![1.0])], kind, Mode::Eval).unwrap();
        assert!((g[0] - (1.0 - q) * 2.0).abs() < 1e-15 && (g[1] - (1.0 - q)).abs() < 1e-15);
        // exactly zero residual takes the -q branch
        let g = net.backward(&p, &[Sample::historical(vec![2.0], vec![2.0])], kind, Mode::Eval).unwrap();
        assert_eq!(g, vec![-q * 2.0, -q]);
    }

    #[test]
    fn eval_forward_is_bit_identical() {
        let spec = NetworkSpec::stacked_rnn(6, 3, 2, 5, Activation::Tanh, Some(0.2), 1, LossKind::Mse);
        let net = Network::new(&spec).unwrap();
        let p = init_params(&spec, 11).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let a = net.predict(&p, &x).unwrap();
        for _ in 0..5 {
            assert_eq!(net.predict(&p, &x).unwrap(), a);
        }
    }

    #[test]
    fn dimension_errors() {
        let spec = NetworkSpec::mlp(&[3, 2], Activation::Relu, None, LossKind::Mse);
        let net = Network::new(&spec).unwrap();
        let p = init_params(&spec, 0).unwrap();
        assert!(matches!(net.predict(&p, &[1.0]), Err(NeuralError::DimensionMismatch { .. })));
        assert!(matches!(
            net.predict(&NetworkParams::zeros(3), &[1.0, 2.0, 3.0]),
            Err(NeuralError::DimensionMismatch { .. })
        ));
    }
}
