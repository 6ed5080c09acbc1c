//! A desk-scale benchmark of modular neural architectures.
//!
//! Synthetic rule-switching tasks ([`rulegen`]), a hierarchy of models from
//! monolithic to ground-truth modular ([`zoo`]), a training loop
//! ([`train`]), collapse and specialization metrics ([`metrics`]) and a
//! resumable sweep harness ([`harness`]), all on a small f64 autodiff core
//! ([`tensor`]).

pub mod error;
pub mod harness;
pub mod rulegen;
pub mod seed;
pub mod metrics;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
