use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),

    #[error("precision layouts differ within one merge")]
    LayoutMismatch,

    #[error("degenerate weights: combined precision is singular")]
    DegenerateWeights,

    #[error("invalid task weights: {0}")]
    InvalidWeights(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("Beta({a}, {b}) has no interior mode")]
    NoInteriorMode { a: f64, b: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("precision not positive definite after update at iteration {iteration}")]
    PrecisionRepair { iteration: usize },

    #[error("task `{task}` does not provide {capability}")]
    MissingCapability { task: String, capability: &'static str },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("spacing {0} does not divide the unit interval")]
    InvalidSpacing(f64),

    #[error("surfaces are defined on different grids")]
    GridMismatch,

    #[error("strategy `{strategy}` cannot use artifacts of kind `{kind}`")]
    IncompatibleStrategy { strategy: String, kind: String },

    #[error("component training failed for seed {seed}: {source}")]
    ComponentFailed { seed: u64, source: Box<Error> },
}
