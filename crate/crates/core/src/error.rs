use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CtcError {
    #[error("target of length {target_len} needs at least {required} frames, only {available} valid")]
    Infeasible {
        target_len: usize,
        required: usize,
        available: usize,
    },
    #[error("label {label} out of range for {classes} classes (blank = {blank})")]
    BadLabel {
        label: usize,
        classes: usize,
        blank: usize,
    },
    #[error("level {level}: {source}")]
    Level {
        level: usize,
        #[source]
        source: Box<CtcError>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Top-level error for the pipeline. Each variant maps onto one of the CLI
/// exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) | Error::Metrics(_) => 3,
            Error::Ctc(CtcError::Infeasible { .. } | CtcError::BadLabel { .. }) => 3,
            Error::Ctc(CtcError::Level { source, .. }) => match **source {
                CtcError::Tensor(_) => 4,
                _ => 3,
            },
            Error::Numeric(_) | Error::Tensor(_) | Error::Ctc(CtcError::Tensor(_)) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
