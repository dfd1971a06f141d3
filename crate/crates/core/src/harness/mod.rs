//! Evaluation, protocols, configuration and run bookkeeping.

pub mod gradchecks;
pub mod metrics;
pub mod protocol;
pub mod validators;
