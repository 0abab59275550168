use alloc::string::String;
use alloc::vec::Vec;

/// Failures raised by tensor construction and the autodiff tape.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: expected {expected} inputs, got {actual}")]
    Arity {
        op: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("selective scan produced a non-finite state at step {step} (sample {sample}, channel {channel})")]
    NonFiniteScan { step: usize, sample: usize, channel: usize },
}

/// Top-level error for model construction, training and evaluation.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error("label length mismatch: predicted={predicted}, truth={truth}")]
    LabelLength { predicted: usize, truth: usize },
    #[error("k-means needs 1 <= k <= n, got k={k}, n={n}")]
    ClusterCount { k: usize, n: usize },
    #[error("contrastive loss needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("training diverged at epoch {epoch} ({phase}): {term} is not finite")]
    Diverged {
        epoch: usize,
        phase: &'static str,
        term: &'static str,
    },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
