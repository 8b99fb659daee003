//! Deterministic tensor operators.
//!
//! Every operator here is bitwise reproducible: the same inputs produce the
//! same output bits on any machine and with any worker count. The rules that
//! make this hold:
//!
//! - all arithmetic is IEEE-754 binary32; no f64 anywhere on a value path,
//!   no FMA, no reassociation (Rust guarantees strict float semantics);
//! - order-sensitive reductions (sums, dot products, row folds) run strictly
//!   serially in ascending index order with a `+0.0` initial accumulator;
//! - parallelism is only applied across order-insensitive dimensions
//!   (independent output rows or elements), with a fixed partition derived
//!   from the worker count, never from the host CPU;
//! - transcendentals are hand-ported single-precision kernels (`det_exp`,
//!   `det_ln`, `det_tanh`) built from f32 arithmetic and bit manipulation;
//! - randomness is a counter-based generator: element `i` of a tensor is a
//!   pure function of `(seed, stream, i)`.
//!
//! Allowed primitives beyond that: `+ - * /`, `sqrt` (correctly rounded per
//! IEEE), comparisons, and integer/bit operations.

mod ctx;
mod math;
mod ops;
mod rng;
mod tensor;

pub use ctx::OpCtx;
pub use math::{det_exp, det_expm1, det_ln, det_tanh};
pub use ops::{
    add, cross_entropy, cross_entropy_backward, matmul, matmul_backward, mul, reduce_sum, relu,
    relu_backward, softmax, softmax_backward, sub,
};
pub use rng::{det_rand, DetRngKey, Dist};
pub use tensor::{transpose2d, Shape, Tensor};

/// Errors raised by operator preconditions. Numeric conditions (overflow,
/// NaN) never error: they propagate through values IEEE-style.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OpError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("row {row}: label {label} outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: i64, classes: usize },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}
