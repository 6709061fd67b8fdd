use thiserror::Error;

/// Errors raised anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid axis {axis} for tensor of rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("cannot reduce over an empty axis")]
    EmptyReduction,

    #[error("log of non-positive value {0}")]
    LogDomain(f64),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph contains a non-smooth op ({0}); use tanh or softplus for second-order quantities")]
    NonSmooth(&'static str),

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("batch of {rows} rows is not divisible by ensemble size {k}")]
    Batch { rows: usize, k: usize },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
