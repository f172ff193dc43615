//! Dense matrices and a tape-based reverse-mode differentiation engine.
//!
//! Every differentiable quantity in the model lives in a [`Graph`] as a
//! [`Var`]. Ops validate shapes eagerly and reject non-finite results, so a
//! NaN surfaces at the op that produced it rather than at the loss.

pub mod gradcheck;
mod graph;
mod matrix;

pub use graph::{sigmoid, Activation, BatchNormState, ElementwiseKind, Graph, Var, ELU_ALPHA};
pub use matrix::Matrix;

/// Whether batch-dependent layers use batch statistics or stored ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
