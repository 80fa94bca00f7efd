//! Variance-free Gaussian estimator selection.
//!
//! Given an observation `Y = f + ε` in ℝⁿ with `ε ~ N(0, σ²I)` and σ unknown,
//! and an arbitrary family of candidate estimators of `f`, this crate selects
//! the candidate minimizing a penalized criterion built from linear
//! approximation spaces. The penalty is obtained by solving, for each space,
//! an expectation equation on two independent χ² variables.
//!
//! The numerical core is generic over the scalar type ([`Real`], implemented
//! for `f32` and `f64`). Special-function evaluation and the penalty solve
//! are always carried out in `f64`. The aliases at the crate root fix the
//! scalar to `f64`, which is what the simulation harness and the CLI use.

pub mod aggregate;
pub mod distkernel;
pub mod error;
pub mod io;
pub mod linsmooth;
pub mod modelspace;
pub mod scalar;
pub mod selector;
pub mod simharness;
pub mod varselect;

pub use error::{Error, Result};
pub use scalar::Real;

pub use distkernel::{PenaltyQuery, PenaltyValue};
pub use selector::{SelectionConfig, SelectionReport};

pub type ModelSpace = modelspace::ModelSpace<f64>;
pub type ModelRegistry = modelspace::ModelRegistry<f64>;
pub type EstimatorCandidate = selector::EstimatorCandidate<f64>;
pub type LinearSmoother = linsmooth::LinearSmoother<f64>;
pub type SmootherDecomposition = linsmooth::SmootherDecomposition<f64>;
pub type Dictionary = aggregate::Dictionary<f64>;
pub type DesignMatrix = varselect::DesignMatrix<f64>;

pub type ModelSpace32 = modelspace::ModelSpace<f32>;
pub type ModelRegistry32 = modelspace::ModelRegistry<f32>;
pub type EstimatorCandidate32 = selector::EstimatorCandidate<f32>;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;
