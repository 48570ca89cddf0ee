//! Reinforced spatial attention over a Conv-4 backbone, trained with a
//! policy-gradient signal from held-out episodes.
//!
//! The pieces: [`backbone`] (split at the insertion point), [`policy`]
//! (the attention agent), [`metalearner`] (prototype and linear heads),
//! [`data`], [`trainer`] and [`eval`].
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metalearner;
pub mod model;
pub mod nn;
pub mod policy;
pub mod trainer;

pub use config::RunConfig;
pub use error::{RapError, Result};
pub use model::{ActionMode, RapModel, Rollout, RolloutOptions};
