use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix contains non-finite entries")]
    NonFiniteMatrix,

    #[error("non-finite network evaluation at t = {t}")]
    NonFiniteEval { t: f64 },

    #[error("training diverged at iteration {iteration} (loss = {loss})")]
    TrainingDiverged { iteration: u64, loss: f64 },

    #[error("error bound undefined: sigma_min = {sigma_min} (flow Jacobian singular on the grid)")]
    BoundUndefined { sigma_min: f64 },

    #[error("error estimator blew up at grid index {index} (prediction outside convergence region)")]
    EstimatorBlowUp { index: usize },

    #[error("dataset has {rows} rows; batch assembly needs at least {needed}")]
    DatasetTooSmall { rows: usize, needed: usize },

    #[error("t = {t} is not on the stored evaluation grid; interpolation is not allowed")]
    OffGrid { t: f64 },

    #[error("integration failed: state became non-finite at t = {t}")]
    IntegrationFailure { t: f64 },

    #[error("unknown system \"{0}\" (expected \"nl-osc\" or \"henon-heiles\")")]
    UnknownSystem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("run failed (arm = {arm}, seed = {seed}): {source}")]
    RunFailed {
        arm: &'static str,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint format: {0}")]
    Checkpoint(#[from] serde_json::Error),

    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
