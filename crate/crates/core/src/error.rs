use alloc::string::String;

/// Errors raised by the segmentation core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("patch size {patch} does not fit a {width}x{height} image")]
    PatchTooLarge {
        patch: usize,
        width: usize,
        height: usize,
    },
    #[error("{width}x{height} image is not divisible by patch size {patch}")]
    NotDivisible {
        patch: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("patch index {index} out of range (P = {count})")]
    PatchOutOfRange { index: usize, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset contains a single class; both labels are required")]
    SingleClass,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("training diverged at epoch {epoch}: non-finite loss ({config})")]
    Diverged { epoch: usize, config: String },
    #[error("non-finite policy gradient; update rejected")]
    NonFiniteGradient,
    #[error("every patch is masked")]
    AllMasked,
    #[error("episode is already finished")]
    EpisodeDone,
    #[error("no trajectories to update from")]
    NoTrajectories,
    #[error("parameter vector has length {actual}, architecture needs {expected}")]
    ParameterCount { expected: usize, actual: usize },
    #[error("encoding does not match the policy input: {0}")]
    EncodingMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;
