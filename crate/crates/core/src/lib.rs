//! Sparse dynamics discovery shared across environments.
//!
//! A multi-environment dataset of ODE trajectories is fitted with a single
//! sparse mask over a polynomial (optionally trigonometric) feature library
//! and per-environment coefficients. The mask and coefficients are trained
//! by differentiating through a fixed-step RK4 solver.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod integrators;
pub mod library;
pub mod seeds;
pub mod sindy;
pub mod spreme;
pub mod systems;

pub use baselines::{intersection_mask, union_mask, MaskAggregationRule};
pub use dataset::{build_benchmark_dataset, build_dataset, Dataset, DatasetSpec, Environment, Trajectory};
pub use error::{Error, Result};
pub use eval::{evaluate_in_domain, evaluate_out_of_domain, EvalRecord, Setting};
pub use library::FeatureLibrary;
pub use spreme::{
    BinaryMask, CoefficientSet, Horizon, Hyperparams, Method, RelaxedMask, SpremeModel,
};
pub use systems::{SystemKind, SystemParams};
