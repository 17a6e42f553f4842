//! Recursive multi-teacher multi-student knowledge distillation for
//! sequential multi-domain place classification.
//!
//! Each season a constant-size ensemble of classifiers is rebuilt from the
//! previous ensemble and the current season's labeled data: a current
//! teacher is pretrained on the new data, a teacher-student assignment
//! matrix is sampled from a strategy, and every student is distilled from
//! its assigned teachers on an unlabeled transfer set.

pub mod classifier;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod retention;
pub mod rkd;
pub mod seed;
pub mod synth;
pub mod tsa;

pub use error::{ErrorCategory, Result, RkdError};
