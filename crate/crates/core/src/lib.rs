//! A laboratory for offline sparse parity learning with 2-layer ReLU MLPs.
//!
//! The crate is organised by subsystem:
//!
//! - [`fourier`]: parities, Majority and Half, their exact Fourier coefficients
//!   and enumeration oracles.
//! - [`popgrad`]: analytic population gradients of sparse ReLU neurons against
//!   a parity target, each paired with a brute-force expectation oracle.
//! - [`mlp`] and [`train`]: a from-scratch 2-layer MLP with explicit backprop,
//!   sparse initialisation schemes and a training loop.
//! - [`theory`]: executable one-step feature-learning constructions for the
//!   over-sparse and under-sparse initialisations.
//! - [`sq`]: statistical-query budget accounting, the label-free reference
//!   trajectory and per-parity correlation audits.
//! - [`harness`]: datasets, grid sweeps, lottery-ticket experiments and
//!   frontier statistics.
//! - [`io`]: configuration parsing and result serialisation.

// `!(x >= 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fourier;
pub mod harness;
pub mod io;
pub mod mlp;
pub mod popgrad;
pub mod rng;
pub mod sq;
pub mod theory;
pub mod train;

pub use error::{LabError, Result};
pub use fourier::{BooleanFnTable, FourierCoefficient, ParityInstance, TieRule};
pub use data::Dataset;
pub use harness::{RunRecord, SampleSize, SweepGrid, SweepResult};
pub use mlp::{InitScheme, LossKind, MlpParams, StepRule};
pub use popgrad::{GapConstants, SparseNeuron};
pub use io::RunManifest;
pub use sq::{SqBudget, StarTrajectory};
pub use theory::{FeatureMap, IdealSecondLayer, SubnetworkReport};
pub use train::{DataSource, TrainConfig, TrainOutcome};
