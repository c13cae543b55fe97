//! Prediction- and update-resilient sigma-point Kalman filters, a
//! Metropolis-Hastings simulator for their least-favorable models, a
//! bootstrap particle filter baseline and the Monte Carlo studies built on
//! them.

// `!(x > 0.0)` is used on purpose to reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod lfm;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod sigma;

pub use error::{Error, Result};
pub use experiments::{EstimateKind, Experiment, ExperimentConfig, MseReport, MseSeries};
pub use filters::{run_filter, FilterKind, FilterTrace, ResilientConfig};
pub use lfm::{mh_sample, LfmKind, MhConfig, MhOutput};
pub use model::{GaussianBelief, NonlinearModel, Trajectory, WorstCaseDrift};
pub use numerics::{Matrix, SpdMatrix, Vector};
pub use sigma::SigmaRule;
