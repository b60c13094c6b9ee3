//! Dual-model debiasing with parameter-space cosine constraints.
//!
//! A bias-amplified model is trained with generalized cross-entropy while a
//! second model trains on difficulty-reweighted cross-entropy; after each
//! batch the debiased model's layers are nudged toward (or away from) the
//! bias model's layers in cosine distance, one frozen layer at a time.
//! The crate also ships synthetic spurious-correlation dataset generators,
//! finite-difference gradient certification, group-wise evaluation, and
//! CSV/SVG reporting used by the experiment harness.

pub mod biasdata;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod mlp;
pub mod optim;
pub mod report;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{cosine, Matrix, ParamVector};
pub use rng::Rng;
