use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sampling step must be finite and non-negative, got {0}")]
    InvalidStep(f64),
    #[error("params.{field} is invalid ({value})")]
    InvalidParam { field: &'static str, value: f64 },
    #[error("horizon.{field} is invalid ({value})")]
    InvalidHorizon { field: &'static str, value: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QcqpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("hessian is not positive semidefinite")]
    NotPsd,
    #[error("ball constraint {index} has non-positive radius {radius}")]
    BadRadius { index: usize, radius: f64 },
    #[error("problem data contains non-finite values")]
    NonFinite,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArenaError {
    #[error("rectangle {index} is too small for a mover ({width:.4} x {height:.4} m)")]
    RectTooSmall { index: usize, width: f64, height: f64 },
    #[error("corridors {a} and {b} overlap by less than a mover footprint")]
    ThinOverlap { a: usize, b: usize },
    #[error("corridor graph is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<usize>>),
    #[error("point ({0:.4}, {1:.4}) is not inside any corridor")]
    Uncovered(f64, f64),
    #[error("no corridor path from ({0:.4}, {1:.4}) to the target")]
    NoPath(f64, f64),
    #[error("arena has no corridors")]
    Empty,
}

/// Failures while planning or simulating an episode.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Qcqp(#[from] QcqpError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error("agent {agent}: {stage} solve failed ({detail})")]
    Solver {
        agent: usize,
        stage: &'static str,
        detail: String,
    },
    #[error("scenario.{field}: {reason}")]
    Scenario { field: String, reason: String },
    #[error("could not place {agents} agents in {attempts} attempts, the arena is too crowded")]
    Crowded { agents: usize, attempts: usize },
    #[error("safety regression: {method} with {agents} agents, trial {trial}: {collisions} collisions")]
    Collision {
        method: String,
        agents: usize,
        trial: usize,
        collisions: usize,
    },
    #[error("bench: {0}")]
    Bench(String),
}

impl PlanError {
    pub fn scenario(field: impl Into<String>, reason: impl Into<String>) -> Self {
        PlanError::Scenario {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
