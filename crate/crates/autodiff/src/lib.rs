//! Dense `f32`/`f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar sweeps the record in reverse and returns
//! [`Gradients`] for every differentiable leaf. Tapes are rebuilt each step
//! and cleared between optimizer updates.
//!
//! Shapes never broadcast implicitly; the one exception is
//! [`Var::mul_channel_broadcast`], which scales every channel of a feature
//! map by a shared spatial attention map.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod float;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use float::Float;
pub use ops::norm::BatchStats;
pub use params::{Bound, ParamEntry, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub use ops::{gaussian_log_norm, sigmoid, softmax_rows};
