//! Nested Monte Carlo solver for semi-linear and full non-linear parabolic
//! PDEs, including problems whose natural diffusion is degenerate.
//!
//! The estimator randomizes switching times with a gamma law, moves antithetic
//! particle triples with exact Gaussian transitions, and estimates `u`, `Du`
//! and `D²u` through Malliavin weights, recursing to a fixed depth.

pub mod error;
pub mod estimator;
pub mod gaussian_step;
pub mod harness;
pub mod oracle;
pub mod problems;
pub mod rand_time;
pub mod smallnum;

pub use error::{Error, Result};
pub use estimator::{EstimateTriple, NestedEstimator, NestingSchedule, RunResult, TerminalClosure};
pub use gaussian_step::{CoordKind, StepCoeffs, StepModel};
pub use problems::ProblemSpec;
pub use rand_time::{RngStream, TimeLaw};
pub use smallnum::{Mat, SymMat, SymRef};
