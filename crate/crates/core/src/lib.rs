//! Knowledge-augmented training for data-poor market applications.
//!
//! The pipeline has four stages:
//!
//! 1. [`classical`]: calibrate low-parameter expert models (affine, kernel
//!    ridge, random forest, price-responsive dispatch) against a small
//!    historical dataset. Dispatch models can be fitted by inverse
//!    optimization through a complementarity branch-and-bound.
//! 2. [`augmentation`]: filter the calibrated models by accuracy, weight the
//!    survivors by inverse error and synthesize targets at new feature sites.
//! 3. [`training`]: train a small network on the hybrid dataset with
//!    mini-batches whose historical share rises over time.
//! 4. [`diagnostics`]: point and probabilistic metrics, gradient noise,
//!    manifold-error decomposition and loss-landscape projections.
//!
//! [`harness`] wires everything to seeded market simulators and runs the
//! scenario matrix used to compare training regimes.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augmentation;
pub mod classical;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod neural;
pub mod training;

pub use dataset::{Dataset, MiniBatch, Normalization, Origin, Sample};
pub use error::{Error, Result};
pub use neural::{Activation, LossKind, Network, NetworkParams, NetworkSpec};
pub use classical::{CalibratedModel, CalibrationMethod, ClassicalModelKind, ModelDescriptor};
pub use augmentation::{AggregationConfig, EnsembleWeights};
pub use training::{Sampling, TrainConfig, TrainTrace};
pub use harness::{ExperimentConfig, ScenarioSpec, SimulatorConfig, Task};
