use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shapes {a:?} and {b:?} are not broadcast-compatible")]
    Broadcast { a: Vec<usize>, b: Vec<usize> },

    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("matmul inner extents differ: {a:?} x {b:?}")]
    InnerExtent { a: Vec<usize>, b: Vec<usize> },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },

    #[error("concat along axis {axis}: ragged input shapes")]
    RaggedConcat { axis: usize },

    #[error("slice {start}..{end} exceeds extent {extent}")]
    SliceBounds {
        start: usize,
        end: usize,
        extent: usize,
    },

    #[error("kernel extent {0} must be odd")]
    EvenKernel(usize),

    #[error("series of length {len} is shorter than the required {min}")]
    SeriesTooShort { len: usize, min: usize },

    #[error("patch length {patch} exceeds sequence length {len}")]
    PatchTooLong { patch: usize, len: usize },

    #[error("length {len} is not divisible by {by}")]
    Indivisible { len: usize, by: usize },

    #[error("adjacency entry at {index} is negative")]
    NegativeAdjacency { index: usize },

    #[error("adjacency entry at {index} is not finite")]
    NonFiniteAdjacency { index: usize },

    #[error("deployment map counts sum to {sum}, expected {nodes}")]
    DeploymentMismatch { sum: usize, nodes: usize },

    #[error("kernel attention denominator {0:e} is degenerate")]
    DegenerateKernel(f64),

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not finite at probe point {0}")]
    NonFiniteProbe(usize),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Attaches a pipeline stage label to an error.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
