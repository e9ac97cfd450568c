//! Dense `f64` tensors, a reverse-mode graph, and Adam.

mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use graph::{silu, Gradients, Graph, NodeId};
pub use kernels::ConvParams;
pub use optim::{Adam, AdamConfig, LrSchedule, WarmupCosine};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("{0}")]
    InvalidArgument(String),
}

impl NumericsError {
    pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        NumericsError::Shape {
            op,
            detail: format!("{left:?} vs {right:?}"),
        }
    }
}
