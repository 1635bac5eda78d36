//! Projected nonlinear least squares (variable projection) for unmixing
//! spike trains convolved with group-specific parametric PSFs, with the
//! coherence-based strong-basin radius bound, a reproducible experiment
//! harness, and a calibration-free LIBS pipeline built on the estimator.

pub mod coherence;
pub mod dictionary;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod libs;
pub mod linalg;
pub mod radius;
pub mod varpro;

pub use dictionary::{
    build_atom, build_derivative_blocks, build_dictionary, synthesize, NoiseSpec, Observation,
    ProblemSpec, SampleGrid, SupportSpec,
};
pub use error::{Error, Result};
pub use kernels::{KernelFamily, KernelShape, Order};
pub use varpro::{SolveResult, SolverOptions, VarProEvaluation};
