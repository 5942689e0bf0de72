//! Reverse-mode differentiation over dense row-major matrices.
//!
//! The engine is deliberately small: a [`Tape`] records primitive
//! applications in topological order, [`Tape::backward`] sweeps it in
//! reverse, and [`grad_check`] verifies any taped scalar function against
//! central finite differences. Parameters are shared into tapes as
//! reference-counted buffers, so recording a forward pass never copies
//! weight matrices.

mod grad_check;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use grad_check::grad_check;
pub use tape::{DenseGrads, ParamId, Tape, Var};
pub use tensor::Tensor;

/// Numeric scalar for all model math. 64-bit by default; the `f32` feature
/// trades precision for speed.
#[cfg(not(feature = "f32"))]
pub type Scalar = f64;
#[cfg(feature = "f32")]
pub type Scalar = f32;

/// Surrogate for −∞ in attention masks. Entries equal to or below this
/// value are hard-masked: softmax assigns them exactly zero probability.
pub const NEG_INF: Scalar = -1e9;

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: Scalar = 1e-5;
