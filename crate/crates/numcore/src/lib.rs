//! Minimal dense-tensor toolkit with reverse-mode automatic differentiation.
//!
//! Values are row-major `f64` tensors. A [`Graph`] records every operation
//! applied during a forward pass (define-by-run) and replays the records in
//! reverse to accumulate gradients. Custom operations plug in through
//! [`Graph::push_op`] with a hand-written backward closure; every built-in
//! operation is checked against central finite differences by
//! [`grad_check`].
//!
//! The crate also hosts the flat binary tensor container used for model
//! checkpoints and dataset images ([`checkpoint`]).

pub mod checkpoint;
mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckOptions, DEFAULT_EPS};
pub use graph::{BackwardFn, Grads, Graph, Values, Var};
pub use tensor::Tensor;

/// Errors raised by tensor construction, graph operations and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("malformed container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
