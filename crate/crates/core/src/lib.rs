//! Random-feature primal-dual solver for high-dimensional nonlocal mean-field games.
//!
//! The interaction kernel of the game is replaced by a random Fourier feature
//! expansion, which turns the population coupling into a time-dependent vector
//! of dual coefficients. Agent trajectories are discretized by direct
//! transcription (explicit Euler) and the resulting saddle-point problem is
//! solved with a primal-dual hybrid gradient iteration:
//!
//! * [`kernels`]: Gaussian kernels, random Fourier features, approximation error.
//! * [`problem`]: running/terminal costs, initial distributions, experiment presets.
//! * [`transcription`]: Euler rollouts, the discrete saddle objective and its adjoint gradient.
//! * [`solver`]: the primal-dual iteration, stopping logic and a potential-minimization oracle.
//! * [`reporting`]: cost decomposition and file exports.

pub mod error;
pub mod kernels;
pub mod problem;
pub mod reporting;
pub mod rng;
pub mod solver;
pub mod transcription;

pub use error::{Error, Result};
pub use kernels::{GaussianKernelSpec, KernelErrorReport, RandomFeatureBasis};
pub use problem::{
    Experiment, InitialDistribution, LagrangianSpec, MfgProblem, ObstacleSpec, PresetParams, TerminalSpec,
};
pub use reporting::CostReport;
pub use solver::{
    HistoryEntry, InitMode, OracleConfig, OracleOutcome, ProxMode, SaddleState, Solution, SolverConfig, StepScaling,
};
pub use transcription::{ControlBatch, Discretization, DualCoefficients, TrajectoryBatch};
