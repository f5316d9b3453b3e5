//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! One [`Tape`] records one forward pass; [`Tape::backward`] replays it in
//! reverse. The primitive set is exactly what the pose network needs
//! (convolutions, dense layers, recurrent cells, resize, concat, the
//! reductions the losses are built from) plus a [`CustomOp`] escape hatch
//! used by the loss kernels in `objectives::diff`.
//!
//! Training runs in `f32`; gradient-check builds instantiate everything at
//! `f64` through the [`Real`] abstraction. Results are bit-deterministic:
//! every kernel is a fixed-order sequential loop.

mod check;
mod kernels;
mod tape;
mod tensor;

pub use check::{central_diff_check, FdCheck, FdReport};
pub use tape::{CustomOp, FiniteCheck, Gradients, Tape, VarId};
pub use tensor::Tensor;

use alloc::vec::Vec;
use core::fmt;

/// Scalar element type: `f32` for training, `f64` for gradient checks.
pub trait Real:
    num_traits::Float
    + core::ops::AddAssign
    + core::ops::SubAssign
    + core::ops::MulAssign
    + core::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Errors raised by tape construction and backward passes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GradError {
    /// Operand shapes do not conform; carries the offending extents.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A value became NaN/Inf where the strict finite check is active.
    NonFinite { op: &'static str },
    /// `backward` was called on a non-scalar node.
    NotScalar { shape: Vec<usize> },
    /// Op-specific precondition failure (e.g. zero-norm quaternion).
    Invalid {
        op: &'static str,
        reason: &'static str,
    },
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            GradError::NonFinite { op } => write!(f, "{op}: non-finite value"),
            GradError::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            GradError::Invalid { op, reason } => write!(f, "{op}: {reason}"),
        }
    }
}

impl core::error::Error for GradError {}
