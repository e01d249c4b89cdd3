//! Dense tensors, reverse-mode differentiation, AdamW and the warmup+cosine
//! learning-rate schedule.

pub mod gradcheck;
mod optim;
mod params;
pub mod recurrence;
mod schedule;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use params::ParamStore;
pub use recurrence::Transition;
pub use schedule::LrSchedule;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::softmax_in_place;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("shape {shape:?} does not match {len} data values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward requires a scalar output, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("parameter `{0}` is not tracked on this tape")]
    DetachedParameter(String),
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient for `{name}`")]
    NonFiniteGradient { name: String },
    #[error("step {step} outside schedule range [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}
