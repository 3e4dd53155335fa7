use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("NaN gradient for parameter `{0}`")]
    NanGradient(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid environment: {0}")]
    InvalidEnv(String),
    #[error("no trajectory of length >= {needed} (longest is {longest})")]
    SegmentTooLong { needed: usize, longest: usize },
    #[error("accuracy undefined: every preference pair is a tie")]
    UndefinedAccuracy,
    #[error("reward member {member} is constant over the dataset (min = max = {value})")]
    DegenerateMember { member: usize, value: f64 },
    #[error("training diverged: {what} at step {step}")]
    Diverged { what: String, step: usize },
    #[error("value iteration with discount 1 requires an acyclic MDP")]
    NonTerminating,
    #[error("enumeration budget of {0} trajectories exceeded")]
    EnumerationBudget(usize),
    #[error("state {0} does not appear in the dataset")]
    StateAbsent(usize),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
