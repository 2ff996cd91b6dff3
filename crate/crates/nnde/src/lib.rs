//! Unsupervised neural-network solvers for smooth dynamical systems that
//! quantify their own prediction error from the residual loss and correct it
//! with a cheaper secondary regression network.
//!
//! The pipeline in one sentence: train a small sin-activation network so the
//! parametrized prediction `zhat(t) = z(0) + (1 - e^-t) N(t)` minimizes the
//! flow residual `ell(t) = dzhat/dt - F(zhat)`; integrate those residuals
//! through a discrete recursion to get an internal estimate `dz_ec(t)` of the
//! true error trajectory; then either bound the error from `max |ell|` and
//! the Jacobian's minimum singular value, or regress a duplicate network onto
//! `dz_ec` and add it to the prediction.
//!
//! Modules map one-to-one onto the moving parts:
//!
//! - [`net`]: fixed 1 -> width -> width -> D sin network with exact time
//!   derivatives and a hand-derived reverse pass.
//! - [`adam`]: the optimizer.
//! - [`systems`]: the nonlinear oscillator and Henon-Heiles Hamiltonians with
//!   analytic flow derivatives.
//! - [`solver`]: residual training loop and checkpointing.
//! - [`errquant`]: error bound, error recursion, dataset generation.
//! - [`correction`]: the regression corrector and the residual-mode second
//!   solver.
//! - [`reference`]: RK4 oracle and the tau / dz_avg / dz_max metrics.
//! - [`harness`]: seeded multi-run studies with CSV artifacts.

pub mod adam;
pub mod correction;
pub mod errquant;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod reference;
pub mod solver;
pub mod systems;

pub use crate::adam::{AdamConfig, AdamState};
pub use crate::correction::{
    assemble_batch, corrected_prediction, CorrectedModel, CorrectionMode, CorrectionState,
};
pub use crate::errquant::{
    error_bound, generate_correction_dataset, integrate_error, ErrorDataset, TruncationOrder,
};
pub use crate::error::{Error, Result};
pub use crate::harness::{
    parse_config_file, run_arm, run_study, sample_initial_conditions, Arm, ExperimentConfig,
    StudyReport,
};
pub use crate::net::{init_params, NetEval, NetworkParams};
pub use crate::reference::{
    external_error, rk4_integrate, runtime_meter, MetricsReport, ReferenceTrajectory,
};
pub use crate::solver::{sample_times, ResidualSample, SolverState};
pub use crate::systems::{
    by_name, henon_heiles, min_singular_value, nonlinear_oscillator, DynamicalSystem,
    SymplecticForm,
};
