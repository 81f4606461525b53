//! Numerical laboratory for Carleman estimates and null controllability of
//! one-dimensional stochastic degenerate parabolic equations.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod carleman;
pub mod coeff;
pub mod error;
pub mod hum;
pub mod noise;
pub mod quadrature;
pub mod random;
pub mod setup;
pub mod solvers;
pub mod spacegrid;
pub mod tridiag;
pub mod weights;

pub use carleman::{
    Backend, EnsembleConfig, GateOutcome, InequalityReport, LevelProfile, WeightSign,
};
pub use coeff::{DegeneracyClass, DiffusionCoefficient, ValidationReport};
pub use error::{Error, Result};
pub use hum::{BackwardControlProblem, CgOptions, ControlResult, TwoControlProblem};
pub use noise::{AdaptedField, Filtration, NoiseTree, RecombiningLattice};
pub use random::{ModeSeries, TrigField};
pub use setup::{Resolution, Setup};
pub use solvers::{
    BackwardProblem, BackwardSolution, ForwardProblem, Solver, Source, StepField, Terminal,
};
pub use spacegrid::{BoundaryRegime, DegenerateOperator, Grading, SpatialGrid, WeightedNorms};
pub use weights::{Direction, Interval, ThetaVariant, TimeWeight, WeightSystem};
