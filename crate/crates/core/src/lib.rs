//! Time-associated meta learning (TAML) for predicting when a clinical event
//! happens.
//!
//! The event horizon is cut into windows, each window becomes a binary
//! classification task, and a MAML-style learner is trained over those
//! window tasks plus time-independent reference outcomes. Support sets are
//! relabeled by event persistence so that sparse windows borrow positives
//! from their neighbours.

pub mod autodiff;
pub mod baselines;
mod error;
pub mod cohort;
pub mod eval;
pub mod meta;
pub mod model;
pub mod tasking;

pub use error::{Error, Result};
