use serde::{Deserialize, Serialize};

use super::{LossKind, NeuralError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

/// One layer of a network.
///
/// A `Recurrent` layer reads either a flat input (split into `unroll` equal
/// time steps) or the sequence emitted by a preceding recurrent layer, and
/// emits the full hidden-state sequence. A `Dense` layer placed after a
/// sequence reads its last step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Layer {
    Dense {
        #[serde(rename = "in")]
        inputs: usize,
        #[serde(rename = "out")]
        outputs: usize,
        activation: Activation,
    },
    Recurrent {
        units: usize,
        activation: Activation,
        unroll: usize,
    },
    Dropout {
        rate: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Width of the flat input vector.
    pub input_dim: usize,
    pub layers: Vec<Layer>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
}

fn default_loss() -> LossKind {
    LossKind::Mse
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Shape {
    Flat(usize),
    Seq { steps: usize, width: usize },
}

/// Resolved layer with its parameter offset and input width.
#[derive(Clone, Debug)]
pub(crate) enum Plan {
    Dense {
        offset: usize,
        inputs: usize,
        outputs: usize,
        act: Activation,
        from_seq: bool,
    },
    Recurrent {
        offset: usize,
        width: usize,
        units: usize,
        steps: usize,
        act: Activation,
    },
    Dropout {
        rate: f64,
        len: usize,
    },
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layers: Vec<Layer>, loss: LossKind) -> Self {
        Self {
            input_dim,
            layers,
            loss,
        }
    }

    /// Dense multilayer perceptron `sizes[0] -> ... -> sizes[last]` with
    /// `hidden` activations and an identity output layer.
    pub fn mlp(sizes: &[usize], hidden: Activation, dropout: Option<f64>, loss: LossKind) -> Self {
        let mut layers = Vec::new();
        for (i, w) in sizes.windows(2).enumerate() {
            let last = i + 2 == sizes.len();
            layers.push(Layer::Dense {
                inputs: w[0],
                outputs: w[1],
                activation: if last { Activation::Identity } else { hidden },
            });
            if !last {
                if let Some(rate) = dropout {
                    layers.push(Layer::Dropout { rate });
                }
            }
        }
        Self::new(sizes[0], layers, loss)
    }

    /// Stack of `cells` recurrent layers followed by a dense output layer.
    #[allow(clippy::too_many_arguments)]
    pub fn stacked_rnn(
        input_dim: usize,
        unroll: usize,
        cells: usize,
        units: usize,
        activation: Activation,
        dropout: Option<f64>,
        outputs: usize,
        loss: LossKind,
    ) -> Self {
        let mut layers = Vec::new();
        for _ in 0..cells {
            layers.push(Layer::Recurrent {
                units,
                activation,
                unroll,
            });
            if let Some(rate) = dropout {
                layers.push(Layer::Dropout { rate });
            }
        }
        layers.push(Layer::Dense {
            inputs: units,
            outputs,
            activation: Activation::Identity,
        });
        Self::new(input_dim, layers, loss)
    }

    pub(crate) fn plan(&self) -> Result<(Vec<Plan>, usize, usize), NeuralError> {
        let bad = |m: String| Err(NeuralError::InvalidSpec(m));
        if self.input_dim == 0 {
            return bad("input_dim must be positive".into());
        }
        if let LossKind::Pinball { q } = self.loss {
            if !(q > 0.0 && q < 1.0) {
                return bad(format!("pinball level {q} outside (0, 1)"));
            }
        }
        let mut shape = Shape::Flat(self.input_dim);
        let mut offset = 0;
        let mut plans = Vec::with_capacity(self.layers.len());
        let mut unroll_seen: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Dense {
                    inputs,
                    outputs,
                    activation,
                } => {
                    let (width, from_seq) = match shape {
                        Shape::Flat(d) => (d, false),
                        Shape::Seq { width, .. } => (width, true),
                    };
                    if width != inputs || outputs == 0 {
                        return bad(format!("layer {i}: dense expects {inputs} inputs, receives {width}"));
                    }
                    plans.push(Plan::Dense {
                        offset,
                        inputs,
                        outputs,
                        act: activation,
                        from_seq,
                    });
                    offset += inputs * outputs + outputs;
                    shape = Shape::Flat(outputs);
                }
                Layer::Recurrent {
                    units,
                    activation,
                    unroll,
                } => {
                    if unroll == 0 || units == 0 {
                        return bad(format!("layer {i}: recurrent needs unroll >= 1 and units >= 1"));
                    }
                    if let Some(u) = unroll_seen {
                        if u != unroll {
                            return bad(format!("layer {i}: unroll {unroll} differs from earlier {u}"));
                        }
                    }
                    unroll_seen = Some(unroll);
                    let width = match shape {
                        Shape::Flat(d) if d % unroll == 0 => d / unroll,
                        Shape::Flat(d) => {
                            return bad(format!("layer {i}: input {d} not divisible into {unroll} steps"))
                        }
                        Shape::Seq { steps, width } if steps == unroll => width,
                        Shape::Seq { steps, .. } => {
                            return bad(format!("layer {i}: sequence of {steps} steps, unroll {unroll}"))
                        }
                    };
                    plans.push(Plan::Recurrent {
                        offset,
                        width,
                        units,
                        steps: unroll,
                        act: activation,
                    });
                    offset += units * width + units * units + units;
                    shape = Shape::Seq {
                        steps: unroll,
                        width: units,
                    };
                }
                Layer::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return bad(format!("layer {i}: dropout rate {rate} outside [0, 1)"));
                    }
                    let len = match shape {
                        Shape::Flat(d) => d,
                        Shape::Seq { steps, width } => steps * width,
                    };
                    plans.push(Plan::Dropout { rate, len });
                }
            }
        }
        let out = match shape {
            Shape::Flat(d) => d,
            Shape::Seq { .. } => return bad("network must end with a dense layer".into()),
        };
        Ok((plans, offset, out))
    }

    /// Number of trainable parameters.
    pub fn param_count(&self) -> Result<usize, NeuralError> {
        self.plan().map(|(_, n, _)| n)
    }

    pub fn output_dim(&self) -> Result<usize, NeuralError> {
        self.plan().map(|(_, _, o)| o)
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, Layer::Dropout { rate } if *rate > 0.0))
    }

    /// Same architecture with every dropout layer removed.
    pub fn without_dropout(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .filter(|l| !matches!(l, Layer::Dropout { .. }))
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    /// Stable 64-bit FNV-1a hash of the canonical JSON form.
    pub fn hash64(&self) -> u64 {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}
