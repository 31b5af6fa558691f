//! Deterministic `f64` matrices with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: every value is a dense row-major
//! [`Matrix`], batches are stacked along rows, and the op set covers what a
//! compact vision transformer, a small residual convnet, projection heads and
//! probe classifiers need. All kernels are single-threaded and evaluate in a
//! fixed order, so repeated runs are bit-identical.

mod check;
mod graph;
mod matrix;

pub use check::{central_difference, relative_error};
pub use graph::{column_stats, softmax_rows, CeTerm, ConvGeometry, Grads, Graph, Var};
pub use matrix::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
}
