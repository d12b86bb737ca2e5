//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Programs are recorded eagerly onto a [`Tape`]: every operation computes
//! its value immediately and appends a node describing how to push
//! gradients back to its operands. [`Tape::backward`] then runs one reverse
//! sweep from a scalar root. All arithmetic is `f64`.
//!
//! The op set is exactly what the segmentation losses and the small
//! encoder-decoder need: elementwise arithmetic, reductions, same-padding
//! convolution, 2x pooling and upsampling, channel concatenation, and a
//! channel softmax. [`finite_difference_check`] verifies any recorded
//! program against central differences.

pub mod check;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use check::{finite_difference_check, rel_error, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;
