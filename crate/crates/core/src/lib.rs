//! Feeding neural networks with incomplete data.
//!
//! A missing data point `(x, J)` is represented by the conditional density of a
//! diagonal Gaussian mixture restricted to the affine subspace of its possible
//! completions. The first hidden layer of a network then computes the *expected*
//! activation of each neuron under that density, which has a closed form for
//! ReLU and RBF units. The mixture parameters are trained jointly with the
//! network weights.
//!
//! Module map:
//!
//! * [`special`]: error function, normal CDF and the `NR` kernel.
//! * [`density`]: mixture parameters, regularized conditional densities, EM.
//! * [`activations`]: expected ReLU/RBF activations and their gradients.
//! * [`nn`]: feedforward networks with a generalized first layer, training.
//! * [`imputers`]: mean / k-nn / dropout / gmm-sample baselines.
//! * [`data`]: datasets with masks, CSV/IDX ingestion, masking, CV splits.
//! * [`experiments`]: experiment configs, runners and metric reports.
//! * [`verification`]: independent oracles, measure distinguishing, cost bench.

pub mod activations;
pub mod data;
pub mod density;
pub mod error;
pub mod experiments;
pub mod imputers;
pub mod nn;
pub mod special;
pub mod verification;

pub use activations::{ActivationGradients, RbfUnit, ReluUnit};
pub use data::{DatasetWithMask, MaskKind, MaskPolicy, NormScheme};
pub use density::{ConditionalGmm, GmmGradient, GmmParams, MissingPoint};
pub use error::{Error, Result};
pub use imputers::{Imputer, ImputerKind};
pub use nn::{Activation, LayerSpec, LossKind, NetworkModel, OptimizerKind, TrainConfig};

/// Crate version recorded in every experiment report.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
